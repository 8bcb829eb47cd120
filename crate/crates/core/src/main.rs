use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use netshrink::arch::Architecture;
use netshrink::config::{parse_constraint, RunConfig};
use netshrink::data::DataSource;
use netshrink::eval::TeacherContext;
use netshrink::orchestrator::{compress, export_plots, load_or_train_teacher, Session, Stages};
use netshrink::reward::ConstraintMode;

const EXIT_HELP: &str = "Exit status: 0 success, 1 runtime failure, 2 usage error, \
3 configuration missing or unreadable, 4 malformed --constraint.";

#[derive(Parser)]
#[command(name = "netshrink", version, about = "Policy-gradient network compression", after_help = EXIT_HELP)]
struct Cli {
    /// Log level filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher and cache its logits.
    TrainTeacher(RunArgs),
    /// Search for a compressed student.
    Compress {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "both")]
        stages: StageArg,
    },
    /// Like `compress`, starting the policies from saved checkpoints.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        removal_checkpoint: Option<PathBuf>,
        #[arg(long)]
        shrink_checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        stages: StageArg,
    },
    /// Score a single architecture file.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        arch: PathBuf,
    },
    /// Turn a run's stage logs into plot-ready CSV files.
    ExportPlots {
        /// Run directory holding stage1.csv and/or stage2.csv.
        #[arg(long)]
        run: PathBuf,
        /// Destination; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hard,
    Annealed,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, replacing the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Score candidates with the analytic surrogate instead of training.
    #[arg(long)]
    surrogate: bool,
    /// Resource bound such as "params<=20000"; repeatable.
    #[arg(long)]
    constraint: Vec<String>,
    /// How violated constraints are penalized (default hard).
    #[arg(long, value_enum)]
    constraint_mode: Option<ModeArg>,
    /// Worker threads for candidate evaluation.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Use only the first N examples of the dataset.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Teacher context directory (default `<out>/teacher`).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// MNIST directory holding the IDX files.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n1: Option<u32>,
    #[arg(long)]
    n2: Option<u32>,
}

enum Failure {
    Config(String),
    Constraint(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn build_config(a: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if a.surrogate {
        cfg.surrogate.enabled = true;
    }
    if !a.constraint.is_empty() {
        cfg.constraints.rows = a
            .constraint
            .iter()
            .map(|c| parse_constraint(c))
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::Constraint(e.to_string()))?;
        if cfg.constraints.mode == ConstraintMode::None {
            cfg.constraints.mode = ConstraintMode::Hard;
        }
    }
    if let Some(m) = a.constraint_mode {
        cfg.constraints.mode = match m {
            ModeArg::Hard => ConstraintMode::Hard,
            ModeArg::Annealed => ConstraintMode::Annealed,
        };
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(t) = &a.teacher {
        cfg.teacher.dir = Some(t.clone());
    }
    if let Some(n) = a.n1 {
        cfg.n1 = n;
    }
    if let Some(n) = a.n2 {
        cfg.n2 = n;
    }
    if a.data.is_some() || a.train_limit.is_some() {
        if let DataSource::Mnist { dir, train_limit } = &mut cfg.teacher.data {
            if let Some(d) = &a.data {
                *dir = d.clone();
            }
            if a.train_limit.is_some() {
                *train_limit = a.train_limit;
            }
        }
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn run_dir(out: &Path, cfg: &RunConfig, seed: u64) -> PathBuf {
    if cfg.seeds.len() > 1 {
        out.join(format!("seed{seed}"))
    } else {
        out.to_path_buf()
    }
}

fn run_compress(a: &RunArgs, cfg: &RunConfig, stages: StageArg) -> Result<(), Failure> {
    let stages = match stages {
        StageArg::One => Stages::One,
        StageArg::Two => Stages::Two,
        StageArg::Both => Stages::Both,
    };
    for &seed in &cfg.seeds {
        let dir = run_dir(&a.out, cfg, seed);
        let mut cfg = cfg.clone();
        if cfg.teacher.dir.is_none() && !cfg.surrogate.enabled {
            cfg.teacher.dir = Some(a.out.join("teacher"));
        }
        let o = compress(&cfg, seed, stages, Some(&dir))?;
        let best_params = o.best.param_count()?;
        println!("seed {seed}: best student {best_params} params (teacher {})", o.report.params_teacher);
        if let Some(f) = &o.report.final_student {
            println!(
                "seed {seed}: final accuracy {:.4} (teacher {:.4}), compression {:.4}",
                f.accuracy, f.a_teacher, f.compression
            );
        }
        println!("seed {seed}: logs in {}", dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::TrainTeacher(a) => {
            let cfg = build_config(&a)?;
            let dir = cfg.teacher.dir.clone().unwrap_or_else(|| a.out.join("teacher"));
            let ctx = load_or_train_teacher(&cfg, &dir)?;
            println!(
                "teacher: {} params, validation accuracy {:.4}, saved in {}",
                ctx.params_teacher(),
                ctx.a_teacher(),
                dir.display()
            );
        }
        Command::Compress { run, stages } => {
            let cfg = build_config(&run)?;
            run_compress(&run, &cfg, stages)?;
        }
        Command::Transfer { run, removal_checkpoint, shrink_checkpoint, stages } => {
            let mut cfg = build_config(&run)?;
            if removal_checkpoint.is_none() && shrink_checkpoint.is_none() {
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "transfer needs --removal-checkpoint and/or --shrink-checkpoint"
                )));
            }
            if removal_checkpoint.is_some() {
                cfg.transfer.removal = removal_checkpoint;
            }
            if shrink_checkpoint.is_some() {
                cfg.transfer.shrink = shrink_checkpoint;
            }
            run_compress(&run, &cfg, stages)?;
        }
        Command::Evaluate { run, arch } => {
            let cfg = build_config(&run)?;
            let candidate: Architecture = std::fs::read_to_string(&arch)?.parse()?;
            let seed = cfg.seeds[0];
            let session = if cfg.surrogate.enabled {
                Session::prepare(&cfg, seed, None)?
            } else {
                let dir = cfg.teacher.dir.clone().unwrap_or_else(|| run.out.join("teacher"));
                Session::with_context(&cfg, seed, Arc::new(TeacherContext::load(&dir)?))?
            };
            let r = session.evaluator.evaluate(&candidate, 0)?;
            println!("status = \"{}\"", r.status());
            println!("params = {}", r.params);
            println!("compression = {}", r.compression);
            println!("accuracy = {}", r.accuracy);
            println!("reward = {}", r.reward);
            println!("constraint_satisfied = {}", r.constraint_satisfied);
            println!("wall_seconds = {}", r.wall_seconds);
        }
        Command::ExportPlots { run, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            for p in export_plots(&run, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_secs().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(3)
        }
        Err(Failure::Constraint(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

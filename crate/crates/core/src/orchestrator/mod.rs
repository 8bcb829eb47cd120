//! End-to-end compression runs: layer removal, then layer shrinkage, then
//! final distillation of the chosen student.
//!
//! One thread owns the policies and optimizer state. Candidate evaluation
//! fans out to the evaluator's worker pool and every random draw is keyed by
//! `(stage, iteration, rollout)` under the master seed, so logs do not depend
//! on the worker count.

mod rundir;
mod stage;

pub use rundir::{csv_rows, export_plots, plot_rows, read_stage_csv, CsvRow, PlotRow, RunDir, StageWriter};
pub use stage::{run_stage1, run_stage2, IterationHook, IterationLog, RolloutLog, StageResult, StageSettings};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::AdamError;
use crate::arch::{ArchError, Architecture, DegeneracyLimits, FormatError};
use crate::config::{ConfigError, RunConfig};
use crate::engine::tensorfile::{net_tensors, save_tensors, TensorError};
use crate::engine::{build_network, evaluate_accuracy, train, EngineError, LossSpec, TrainConfig, TrainableNet};
use crate::eval::{
    train_teacher, CounterSnapshot, DistillOracle, EvalError, Evaluator, SurrogateModel, TeacherContext, TeacherSettings,
};
use crate::pg::PgError;
use crate::policy::{CheckpointError, PolicyError, PolicyKind, RecurrentPolicy};
use crate::reward::{compression_ratio, RewardConfig, RewardError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Pg(#[from] PgError),
    #[error("policy update: {0}")]
    Adam(#[from] AdamError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("report: {0}")]
    Report(#[from] toml::ser::Error),
    #[error(
        "stage {stage}: every rollout was degenerate for {streak} consecutive iterations (last: {iteration}); \
         the policy has collapsed onto invalid architectures"
    )]
    AllDegenerate { stage: u8, iteration: u32, streak: u32 },
    #[error("a {} policy cannot drive this stage", .0.name())]
    PolicyKind(PolicyKind),
    #[error("the stage-2 starting architecture is not Valid")]
    InvalidCandidate,
    #[error("no stage logs in {0}")]
    NoLogs(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stages {
    One,
    Two,
    Both,
}

impl Stages {
    fn stage1(self) -> bool {
        self != Stages::Two
    }

    fn stage2(self) -> bool {
        self != Stages::One
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub accuracy: f64,
    pub params: u64,
    pub compression: f64,
    /// Student accuracy minus teacher accuracy.
    pub delta_accuracy: f64,
    pub a_teacher: f64,
    pub params_teacher: u64,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalizeSettings {
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
}

/// Trains `arch` from scratch on hard labels plus `lambda` times the
/// distillation term, then measures validation accuracy.
pub fn finalize_student(
    arch: &Architecture,
    ctx: &TeacherContext,
    s: &FinalizeSettings,
) -> Result<(TrainableNet<f32>, FinalReport), RunError> {
    let mut net = build_network::<f32>(arch, derive_seed(s.seed, &[3, 0]))?;
    let loss = if s.lambda == 0.0 { LossSpec::HARD } else { LossSpec::combined(s.lambda) };
    let cfg = TrainConfig { epochs: s.epochs, seed: derive_seed(s.seed, &[3, 1]), ..Default::default() };
    train(&mut net, &ctx.train, &loss, &cfg)?;
    let accuracy = evaluate_accuracy(&net, &ctx.val)?;
    let params = arch.param_count()?;
    let report = FinalReport {
        accuracy,
        params,
        compression: compression_ratio(params, ctx.params_teacher())?,
        delta_accuracy: accuracy - ctx.a_teacher(),
        a_teacher: ctx.a_teacher(),
        params_teacher: ctx.params_teacher(),
        epochs: s.epochs,
        lambda: s.lambda,
        seed: s.seed,
    };
    Ok((net, report))
}

/// Surrogate counterpart of [`finalize_student`]: the proxy accuracy, no training.
pub fn finalize_surrogate(arch: &Architecture, model: &SurrogateModel, seed: u64) -> Result<FinalReport, RunError> {
    let params = arch.param_count()?;
    let params_teacher = model.teacher.param_count()?;
    let accuracy = model.accuracy_fn(arch);
    Ok(FinalReport {
        accuracy,
        params,
        compression: compression_ratio(params, params_teacher)?,
        delta_accuracy: accuracy - model.a_teacher,
        a_teacher: model.a_teacher,
        params_teacher,
        epochs: 0,
        lambda: 0.0,
        seed,
    })
}

/// Everything a run needs besides the policies: the teacher and an evaluator
/// backed by either a trained teacher or the surrogate.
pub struct Session {
    pub teacher: Architecture,
    pub evaluator: Evaluator,
    pub surrogate: Option<SurrogateModel>,
    pub context: Option<Arc<TeacherContext>>,
}

/// Loads the teacher context from `dir`, or trains and saves it there.
pub fn load_or_train_teacher(cfg: &RunConfig, dir: &Path) -> Result<TeacherContext, RunError> {
    let arch = cfg.teacher_arch()?;
    if dir.join("meta.toml").exists() {
        let ctx = TeacherContext::load(dir)?;
        if ctx.arch != arch {
            return Err(ConfigError::Invalid(format!(
                "teacher in {} does not match the configured architecture",
                dir.display()
            ))
            .into());
        }
        return Ok(ctx);
    }
    let settings = TeacherSettings {
        epochs: cfg.teacher.epochs,
        seed: cfg.teacher.seed,
        val_fraction: cfg.teacher.val_fraction,
        ..Default::default()
    };
    log::info!("training teacher into {}", dir.display());
    let ctx = train_teacher(&arch, &cfg.teacher.data, &settings)?;
    log::info!("teacher accuracy {:.4}", ctx.a_teacher());
    ctx.save(dir)?;
    Ok(ctx)
}

impl Session {
    /// Surrogate sessions need no files. Otherwise the teacher comes from
    /// `teacher.dir`, or `<out>/teacher` when unset.
    pub fn prepare(cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<Self, RunError> {
        let teacher = cfg.teacher_arch()?;
        let limits = DegeneracyLimits { max_flatten: cfg.max_flatten };
        let params_teacher = teacher.param_count()?;
        let reward = |a_teacher: f64| RewardConfig {
            a_teacher,
            constraints: cfg.constraints.rows.clone(),
            mode: cfg.constraints.mode,
            t_anneal: 1,
        };
        if cfg.surrogate.enabled {
            let mut model = SurrogateModel::new(teacher.clone(), cfg.surrogate.a_teacher);
            model.alpha = cfg.surrogate.alpha;
            model.beta = cfg.surrogate.beta;
            let evaluator =
                Evaluator::new(Arc::new(model.clone()), params_teacher, reward(model.a_teacher), limits, cfg.workers)?;
            return Ok(Session { teacher, evaluator, surrogate: Some(model), context: None });
        }
        let dir = match (&cfg.teacher.dir, out) {
            (Some(d), _) => d.clone(),
            (None, Some(o)) => o.join("teacher"),
            (None, None) => PathBuf::from("teacher"),
        };
        let ctx = Arc::new(load_or_train_teacher(cfg, &dir)?);
        let oracle = DistillOracle::new(ctx.clone(), cfg.eval_epochs, seed);
        let evaluator = Evaluator::new(Arc::new(oracle), params_teacher, reward(ctx.a_teacher()), limits, cfg.workers)?;
        Ok(Session { teacher, evaluator, surrogate: None, context: Some(ctx) })
    }

    /// Builds a session around an already trained teacher.
    pub fn with_context(cfg: &RunConfig, seed: u64, ctx: Arc<TeacherContext>) -> Result<Self, RunError> {
        let limits = DegeneracyLimits { max_flatten: cfg.max_flatten };
        let reward = RewardConfig {
            a_teacher: ctx.a_teacher(),
            constraints: cfg.constraints.rows.clone(),
            mode: cfg.constraints.mode,
            t_anneal: 1,
        };
        let oracle = DistillOracle::new(ctx.clone(), cfg.eval_epochs, seed);
        let evaluator = Evaluator::new(Arc::new(oracle), ctx.params_teacher(), reward, limits, cfg.workers)?;
        Ok(Session { teacher: ctx.arch.clone(), evaluator, surrogate: None, context: Some(ctx) })
    }

    pub fn a_teacher(&self) -> f64 {
        self.evaluator.reward.a_teacher
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub best_reward: f64,
    pub params: u64,
    pub compression: f64,
    pub feasible: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub surrogate: bool,
    pub params_teacher: u64,
    pub a_teacher: f64,
    pub stage1: Option<StageSummary>,
    pub stage2: Option<StageSummary>,
    #[serde(rename = "final")]
    pub final_student: Option<FinalReport>,
    pub evaluations: u64,
    pub trainings: u64,
    pub cache_hits: u64,
    pub degenerate_skips: u64,
}

pub struct RunOutcome {
    pub stage1: Option<StageResult>,
    pub stage2: Option<StageResult>,
    pub best: Architecture,
    pub report: RunReport,
    pub counters: CounterSnapshot,
}

fn initial_policy(kind: PolicyKind, checkpoint: Option<&PathBuf>, seed: u64) -> Result<RecurrentPolicy, RunError> {
    let fresh = match kind {
        PolicyKind::Removal => RecurrentPolicy::removal(derive_seed(seed, &[10])),
        PolicyKind::Shrink => RecurrentPolicy::shrink(derive_seed(seed, &[20])),
    };
    match checkpoint {
        None => Ok(fresh),
        Some(p) => {
            let loaded = RecurrentPolicy::load(p)?;
            loaded.check_compatible(&fresh)?;
            log::info!("starting the {} policy from {}", kind.name(), p.display());
            Ok(loaded)
        }
    }
}

fn summarize(r: &StageResult, params_teacher: u64) -> Result<StageSummary, RunError> {
    let params = r.best.param_count()?;
    Ok(StageSummary {
        best_reward: r.best_reward,
        params,
        compression: compression_ratio(params, params_teacher)?,
        feasible: r.feasible,
        iterations: r.logs.len(),
    })
}

fn stage_hook<'a>(
    dir: Option<&'a RunDir>,
    stage: u8,
    every: u32,
) -> Result<Box<IterationHook<'a>>, RunError> {
    let Some(dir) = dir else {
        return Ok(Box::new(|_: &IterationLog, _: &RecurrentPolicy| Ok(())));
    };
    let mut w = dir.stage_writer(stage)?;
    Ok(Box::new(move |log: &IterationLog, policy: &RecurrentPolicy| {
        w.append(log)?;
        let done = log.iteration + 1;
        if every > 0 && done.is_multiple_of(every) {
            policy.save(&dir.checkpoint_path(stage, done))?;
        }
        Ok(())
    }))
}

/// Runs the selected stages for one master seed, writing into `out` if given.
pub fn compress(cfg: &RunConfig, seed: u64, stages: Stages, out: Option<&Path>) -> Result<RunOutcome, RunError> {
    let mut session = Session::prepare(cfg, seed, out)?;
    compress_with(cfg, seed, stages, out, &mut session)
}

/// [`compress`] with a prepared session.
pub fn compress_with(
    cfg: &RunConfig,
    seed: u64,
    stages: Stages,
    out: Option<&Path>,
    session: &mut Session,
) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let dir = out.map(RunDir::create).transpose()?;
    if let Some(d) = &dir {
        d.write_config(cfg)?;
    }
    let params_teacher = session.evaluator.params_teacher;
    let settings = |iterations: u32, lr: f64| StageSettings {
        iterations,
        m: cfg.m,
        lr,
        baseline_beta: cfg.baseline_beta,
        actor_critic: cfg.actor_critic,
        seed,
        abort_after: cfg.abort_after,
    };

    let mut stage1 = None;
    let (mut candidate, mut cand_reward, mut cand_ok) = match &cfg.stage2_start {
        Some(p) => (std::fs::read_to_string(p)?.parse::<Architecture>()?, 0.0, true),
        None => (session.teacher.clone(), 0.0, true),
    };
    if stages.stage1() {
        session.evaluator.reward.t_anneal = cfg.t_anneal(cfg.n1);
        let policy = initial_policy(PolicyKind::Removal, cfg.transfer.removal.as_ref(), seed)?;
        let mut hook = stage_hook(dir.as_ref(), 1, cfg.checkpoint_every)?;
        let r = run_stage1(&session.teacher, &session.evaluator, policy, &settings(cfg.n1, cfg.lr_remove), &mut hook)?;
        drop(hook);
        if let Some(d) = &dir {
            d.write_best(1, &r.best, &r.policy)?;
        }
        log::info!("stage 1 best reward {:.4}", r.best_reward);
        (candidate, cand_reward, cand_ok) = (r.best.clone(), r.best_reward, r.feasible);
        stage1 = Some(r);
    } else if cfg.stage2_start.is_some() {
        let rep = session.evaluator.evaluate(&candidate, 0)?;
        cand_reward = rep.reward;
        cand_ok = session.evaluator.reward.constraints.is_empty() || rep.constraint_satisfied;
    }

    let mut stage2 = None;
    if stages.stage2() {
        session.evaluator.reward.t_anneal = cfg.t_anneal(cfg.n2);
        if let Some(model) = &session.surrogate {
            session.evaluator.set_oracle(Arc::new(model.clone().with_reference(candidate.clone())));
        }
        let policy = initial_policy(PolicyKind::Shrink, cfg.transfer.shrink.as_ref(), seed)?;
        let mut hook = stage_hook(dir.as_ref(), 2, cfg.checkpoint_every)?;
        let r = run_stage2(
            &candidate,
            cand_reward,
            cand_ok,
            &session.teacher,
            &session.evaluator,
            policy,
            &settings(cfg.n2, cfg.lr_shrink),
            &mut hook,
        )?;
        drop(hook);
        if let Some(d) = &dir {
            d.write_best(2, &r.best, &r.policy)?;
        }
        log::info!("stage 2 best reward {:.4}", r.best_reward);
        candidate = r.best.clone();
        stage2 = Some(r);
    }

    let final_student = if !cfg.finalize.enabled {
        None
    } else if let Some(model) = &session.surrogate {
        let model = model.clone().with_reference(stage1.as_ref().map_or(session.teacher.clone(), |r| r.best.clone()));
        Some(finalize_surrogate(&candidate, &model, seed)?)
    } else {
        let ctx = session.context.as_ref().expect("non-surrogate sessions carry a teacher");
        let fs = FinalizeSettings { epochs: cfg.finalize.epochs, lambda: cfg.finalize.lambda, seed };
        let (net, rep) = finalize_student(&candidate, ctx, &fs)?;
        if let Some(d) = &dir {
            save_tensors(&d.root.join("student.tnsr"), &net_tensors(&net))?;
        }
        log::info!("final student accuracy {:.4}, compression {:.4}", rep.accuracy, rep.compression);
        Some(rep)
    };

    let counters = session.evaluator.counters.snapshot();
    let report = RunReport {
        seed,
        surrogate: session.surrogate.is_some(),
        params_teacher,
        a_teacher: session.a_teacher(),
        stage1: stage1.as_ref().map(|r| summarize(r, params_teacher)).transpose()?,
        stage2: stage2.as_ref().map(|r| summarize(r, params_teacher)).transpose()?,
        final_student,
        evaluations: counters.evaluations,
        trainings: counters.trainings,
        cache_hits: counters.cache_hits,
        degenerate_skips: counters.degenerate_skips,
    };
    if let Some(d) = &dir {
        d.write_report(&report)?;
    }
    Ok(RunOutcome { stage1, stage2, best: candidate, report, counters })
}

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{IterationLog, RunError};
use crate::arch::Architecture;
use crate::config::RunConfig;
use crate::policy::RecurrentPolicy;

/// One line of a stage log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub stage: u8,
    pub iteration: u32,
    pub rollout: usize,
    pub reward: f64,
    pub accuracy: f64,
    pub compression: f64,
    pub params: u64,
    pub degenerate: String,
    pub baseline: f64,
}

pub fn csv_rows(log: &IterationLog) -> impl Iterator<Item = CsvRow> + '_ {
    log.rollouts.iter().map(move |r| CsvRow {
        stage: log.stage,
        iteration: log.iteration,
        rollout: r.rollout,
        reward: r.reward,
        accuracy: r.accuracy,
        compression: r.compression,
        params: r.params,
        degenerate: r.degenerate.clone(),
        baseline: log.baseline,
    })
}

pub fn read_stage_csv(path: &Path) -> Result<Vec<CsvRow>, RunError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<CsvRow>, _>>()?)
}

/// Output directory of one run:
///
/// ```text
/// config.toml              configuration snapshot
/// stage1.csv, stage2.csv   one row per rollout
/// checkpoints/             policies every few iterations
/// policy_stage{1,2}.policy final policies
/// best_stage{1,2}.arch     best candidates
/// report.toml              summary and final student metrics
/// ```
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, RunError> {
        std::fs::create_dir_all(root.join("checkpoints"))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn stage_csv_path(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}.csv"))
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<(), RunError> {
        std::fs::write(self.root.join("config.toml"), cfg.to_toml()?)?;
        Ok(())
    }

    pub fn stage_writer(&self, stage: u8) -> Result<StageWriter, RunError> {
        Ok(StageWriter { csv: csv::Writer::from_path(self.stage_csv_path(stage))? })
    }

    pub fn checkpoint_path(&self, stage: u8, iteration: u32) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage{stage}_iter{iteration:04}.policy"))
    }

    pub fn policy_path(&self, stage: u8) -> PathBuf {
        self.root.join(format!("policy_stage{stage}.policy"))
    }

    pub fn best_arch_path(&self, stage: u8) -> PathBuf {
        self.root.join(format!("best_stage{stage}.arch"))
    }

    pub fn write_best(&self, stage: u8, arch: &Architecture, policy: &RecurrentPolicy) -> Result<(), RunError> {
        std::fs::write(self.best_arch_path(stage), arch.to_string())?;
        policy.save(&self.policy_path(stage))?;
        Ok(())
    }

    pub fn write_report<T: Serialize>(&self, report: &T) -> Result<(), RunError> {
        std::fs::write(self.root.join("report.toml"), toml::to_string(report)?)?;
        Ok(())
    }
}

pub struct StageWriter {
    csv: csv::Writer<File>,
}

impl StageWriter {
    pub fn append(&mut self, log: &IterationLog) -> Result<(), RunError> {
        for row in csv_rows(log) {
            self.csv.serialize(row)?;
        }
        self.csv.flush()?;
        Ok(())
    }
}

/// Plot-ready rows: per rollout, with the iteration's mean reward and the
/// running best Valid reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub iteration: u32,
    pub rollout: usize,
    pub reward: f64,
    pub accuracy: f64,
    pub compression: f64,
    pub params: u64,
    pub mean_reward: f64,
    pub best_so_far: f64,
}

pub fn plot_rows(rows: &[CsvRow]) -> Vec<PlotRow> {
    let mut out = Vec::with_capacity(rows.len());
    let mut best = -1.0f64;
    let mut start = 0;
    while start < rows.len() {
        let it = rows[start].iteration;
        let end = start + rows[start..].iter().take_while(|r| r.iteration == it).count();
        let group = &rows[start..end];
        let mean = group.iter().map(|r| r.reward).sum::<f64>() / group.len() as f64;
        for r in group {
            if r.degenerate == "Valid" {
                best = best.max(r.reward);
            }
            out.push(PlotRow {
                iteration: r.iteration,
                rollout: r.rollout,
                reward: r.reward,
                accuracy: r.accuracy,
                compression: r.compression,
                params: r.params,
                mean_reward: mean,
                best_so_far: best,
            });
        }
        start = end;
    }
    out
}

/// Writes `plot_stage{1,2}.csv` next to each stage log found in `run`.
/// Returns the files written.
pub fn export_plots(run: &Path, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for stage in [1u8, 2] {
        let src = run.join(format!("stage{stage}.csv"));
        if !src.exists() {
            continue;
        }
        let dst = out.join(format!("plot_stage{stage}.csv"));
        let mut w = csv::Writer::from_path(&dst)?;
        for row in plot_rows(&read_stage_csv(&src)?) {
            w.serialize(row)?;
        }
        w.flush()?;
        written.push(dst);
    }
    if written.is_empty() {
        return Err(RunError::NoLogs(run.to_path_buf()));
    }
    Ok(written)
}

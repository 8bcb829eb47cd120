//! Run configuration, read from and snapshotted to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{presets, Architecture, DEFAULT_MAX_FLATTEN};
use crate::data::DataSource;
use crate::eval::{DEFAULT_ALPHA, DEFAULT_BETA};
use crate::reward::{Constraint, ConstraintMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot serialize configuration: {0}")]
    Write(#[from] toml::ser::Error),
}

#[derive(Debug, Error, PartialEq)]
#[error("cannot parse constraint `{0}`: expected `params<=N`")]
pub struct ConstraintParseError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    /// One of the built-in presets; ignored when `arch_file` is set.
    pub preset: Option<String>,
    pub arch_file: Option<PathBuf>,
    /// Teacher context directory. Trained and written here if absent.
    /// Defaults to `<out>/teacher`.
    pub dir: Option<PathBuf>,
    pub data: DataSource,
    pub epochs: usize,
    pub val_fraction: f64,
    /// Seeds teacher initialization, shuffling and the train/validation split.
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            preset: None,
            arch_file: None,
            dir: None,
            data: DataSource::Mnist { dir: "data/mnist-10k".into(), train_limit: None },
            epochs: 10,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    pub enabled: bool,
    pub a_teacher: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        SurrogateSection { enabled: false, a_teacher: 0.95, alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSection {
    pub mode: ConstraintMode,
    /// Iterations over which the annealing weight decays to zero; 0 means
    /// half the stage length.
    pub t_anneal: u32,
    pub rows: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinalizeSection {
    pub enabled: bool,
    pub epochs: usize,
    /// Weight of the distillation term next to hard-label cross-entropy.
    pub lambda: f64,
}

impl Default for FinalizeSection {
    fn default() -> Self {
        FinalizeSection { enabled: true, epochs: 15, lambda: 0.5 }
    }
}

/// Policy checkpoints to start from instead of random weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub removal: Option<PathBuf>,
    pub shrink: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seeds; each gets its own run.
    pub seeds: Vec<u64>,
    pub n1: u32,
    pub n2: u32,
    /// Rollouts per policy update.
    pub m: usize,
    pub lr_remove: f64,
    pub lr_shrink: f64,
    pub baseline_beta: f64,
    pub actor_critic: bool,
    pub workers: usize,
    /// Distillation epochs per searched candidate.
    pub eval_epochs: usize,
    pub max_flatten: usize,
    pub checkpoint_every: u32,
    /// Consecutive all-degenerate iterations tolerated before aborting.
    pub abort_after: u32,
    /// Starting architecture for a stage-2-only run; defaults to the teacher.
    pub stage2_start: Option<PathBuf>,
    pub teacher: TeacherSection,
    pub surrogate: SurrogateSection,
    pub constraints: ConstraintSection,
    pub finalize: FinalizeSection,
    pub transfer: TransferSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0],
            n1: 100,
            n2: 100,
            m: 5,
            lr_remove: 0.003,
            lr_shrink: 0.01,
            baseline_beta: 0.9,
            actor_critic: false,
            workers: 1,
            eval_epochs: 5,
            max_flatten: DEFAULT_MAX_FLATTEN,
            checkpoint_every: 10,
            abort_after: 10,
            stage2_start: None,
            teacher: TeacherSection::default(),
            surrogate: SurrogateSection::default(),
            constraints: ConstraintSection::default(),
            finalize: FinalizeSection::default(),
            transfer: TransferSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.n1 == 0 || self.n2 == 0 {
            return bad("n1 and n2 must be at least 1");
        }
        if self.m == 0 {
            return bad("m must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.baseline_beta >= 0.0 && self.baseline_beta < 1.0) {
            return bad("baseline_beta must lie in [0, 1)");
        }
        if self.constraints.rows.iter().any(|r| r.coeffs.len() != 1) {
            return bad("constraint rows take one coefficient (on the parameter count)");
        }
        if self.constraints.mode != ConstraintMode::None && self.constraints.rows.is_empty() {
            return bad("a constraint mode is set but no constraint rows are given");
        }
        if self.teacher.preset.as_deref().is_some_and(|p| presets::by_name(p).is_none()) {
            return bad(&format!("unknown teacher preset; expected one of {:?}", presets::NAMES));
        }
        Ok(())
    }

    /// Teacher architecture: `arch_file`, else `preset`, else `surrogate-a`
    /// for surrogate runs and `mnist-conv` otherwise.
    pub fn teacher_arch(&self) -> Result<Architecture, ConfigError> {
        if let Some(p) = &self.teacher.arch_file {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.clone(), source })?;
            return text.parse().map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())));
        }
        let name = match &self.teacher.preset {
            Some(n) => n.as_str(),
            None if self.surrogate.enabled => "surrogate-a",
            None => "mnist-conv",
        };
        presets::by_name(name).ok_or_else(|| ConfigError::Invalid(format!("unknown preset `{name}`")))
    }

    /// `t_anneal` for a stage of `iterations` iterations.
    pub fn t_anneal(&self, iterations: u32) -> u32 {
        match self.constraints.t_anneal {
            0 => (iterations / 2).max(1),
            t => t,
        }
    }
}

/// Parses `params<=N`. `N` may carry a `k` or `m` suffix (thousands, millions).
pub fn parse_constraint(s: &str) -> Result<Constraint, ConstraintParseError> {
    let err = || ConstraintParseError(s.to_string());
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let rhs = compact.strip_prefix("params<=").ok_or_else(err)?;
    let (num, scale) = match rhs.char_indices().last() {
        Some((i, 'k' | 'K')) => (&rhs[..i], 1e3),
        Some((i, 'm' | 'M')) => (&rhs[..i], 1e6),
        _ => (rhs, 1.0),
    };
    let v: f64 = num.parse().map_err(|_| err())?;
    if !v.is_finite() || v < 0.0 {
        return Err(err());
    }
    Ok(Constraint::max_params(v * scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_strings() {
        assert_eq!(parse_constraint("params<=20000").unwrap(), Constraint { coeffs: vec![1.0], bound: 20000.0 });
        assert_eq!(parse_constraint(" params <= 20K ").unwrap().bound, 20000.0);
        assert_eq!(parse_constraint("params<=1.5m").unwrap().bound, 1.5e6);
        for bad in ["params<20000", "flops<=3", "params<=", "params<=-4", "params<=x"] {
            assert!(parse_constraint(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig { n1: 7, actor_critic: true, seeds: vec![3, 4], ..Default::default() };
        cfg.constraints.mode = ConstraintMode::Annealed;
        cfg.constraints.rows.push(Constraint::max_params(20000.0));
        cfg.transfer.removal = Some("a/b.policy".into());
        cfg.teacher.data = DataSource::Synthetic(Default::default());
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new("x")).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml(&RunConfig::default().to_toml().unwrap(), Path::new("x")).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_files_take_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml("n1 = 3\n[surrogate]\nenabled = true\n", Path::new("x")).unwrap();
        assert_eq!((cfg.n1, cfg.n2, cfg.m), (3, 100, 5));
        assert_eq!(cfg.teacher_arch().unwrap(), presets::surrogate_teacher_a());
        assert!(RunConfig::from_toml("n3 = 1", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("m = 0", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("[constraints]\nmode = \"hard\"", Path::new("x")).is_err());
    }

    #[test]
    fn anneal_horizon() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.t_anneal(30), 15);
        assert_eq!(cfg.t_anneal(1), 1);
        cfg.constraints.t_anneal = 8;
        assert_eq!(cfg.t_anneal(30), 8);
    }
}

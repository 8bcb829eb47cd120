//! Turns candidate architectures into rewards.
//!
//! An [`AccuracyOracle`] supplies the accuracy of a Valid candidate, either
//! by distilling it from a trained teacher ([`DistillOracle`]) or from the
//! analytic [`SurrogateModel`]. The [`Evaluator`] wraps an oracle with the
//! degeneracy guard, a result cache, work counters and the reward pipeline.

mod surrogate;
mod teacher;

pub use surrogate::{SurrogateModel, DEFAULT_ALPHA, DEFAULT_BETA};
pub use teacher::{train_teacher, DistillOracle, TeacherContext, TeacherMeta, TeacherSettings};

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use thiserror::Error;

use crate::arch::{ArchError, Architecture, DegeneracyClass, DegeneracyLimits, FormatError};
use crate::data::DataError;
use crate::engine::tensorfile::TensorError;
use crate::engine::EngineError;
use crate::reward::{compression_ratio, score, RewardConfig, RewardError, PENALTY};
use crate::seed::text_digest;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("architecture file: {0}")]
    Format(#[from] FormatError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("metadata: {0}")]
    MetaRead(#[from] toml::de::Error),
    #[error("metadata: {0}")]
    MetaWrite(#[from] toml::ser::Error),
    #[error("{0}")]
    Corrupt(String),
    #[error("cannot build a worker pool: {0}")]
    Pool(String),
}

/// An oracle's verdict on a Valid candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assessment {
    pub accuracy: f64,
    /// Training produced a non-finite loss; the candidate scores -1.
    pub diverged: bool,
    /// Whether a network was actually trained.
    pub trained: bool,
    pub wall_seconds: f64,
}

pub trait AccuracyOracle: Send + Sync {
    fn assess(&self, arch: &Architecture) -> Assessment;

    /// Cache namespace: oracles that may disagree on an architecture must
    /// return different scopes.
    fn scope(&self) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// NaN when no accuracy was measured (degenerate, uncompressed or diverged).
    pub accuracy: f64,
    pub params: u64,
    pub degenerate: DegeneracyClass,
    pub wall_seconds: f64,
    pub reward: f64,
    pub compression: f64,
    pub constraint_satisfied: bool,
    pub diverged: bool,
}

impl EvalReport {
    /// Recomputes the reward from the stored fields.
    pub fn recompute_reward(&self, params_teacher: u64, cfg: &RewardConfig, iteration: u32) -> Result<f64, RewardError> {
        if self.diverged {
            return Ok(PENALTY);
        }
        Ok(score(self.params, params_teacher, self.accuracy, self.degenerate, cfg, iteration)?.reward)
    }

    /// Label for logs: the degeneracy class, or `Diverged`.
    pub fn status(&self) -> &'static str {
        if self.diverged {
            "Diverged"
        } else {
            self.degenerate.label()
        }
    }
}

#[derive(Debug, Default)]
pub struct EvalCounters {
    evaluations: AtomicU64,
    trainings: AtomicU64,
    cache_hits: AtomicU64,
    degenerate_skips: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub evaluations: u64,
    pub trainings: u64,
    pub cache_hits: u64,
    pub degenerate_skips: u64,
}

impl EvalCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            evaluations: self.evaluations.load(Ordering::Relaxed),
            trainings: self.trainings.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            degenerate_skips: self.degenerate_skips.load(Ordering::Relaxed),
        }
    }

    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }
}

type CacheKey = (u64, u64);

/// Degeneracy guard, cache and reward pipeline around an oracle. Batches are
/// assessed on a worker pool and returned in input order.
pub struct Evaluator {
    oracle: Arc<dyn AccuracyOracle>,
    pub params_teacher: u64,
    pub reward: RewardConfig,
    pub limits: DegeneracyLimits,
    pub counters: Arc<EvalCounters>,
    cache: Mutex<HashMap<CacheKey, Assessment>>,
    pool: rayon::ThreadPool,
}

impl Evaluator {
    pub fn new(
        oracle: Arc<dyn AccuracyOracle>,
        params_teacher: u64,
        reward: RewardConfig,
        limits: DegeneracyLimits,
        workers: usize,
    ) -> Result<Self, EvalError> {
        if params_teacher == 0 {
            return Err(RewardError::ZeroTeacher.into());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| EvalError::Pool(e.to_string()))?;
        Ok(Evaluator {
            oracle,
            params_teacher,
            reward,
            limits,
            counters: Arc::new(EvalCounters::default()),
            cache: Mutex::new(HashMap::new()),
            pool,
        })
    }

    /// Replaces the oracle, keeping the cache (entries are scoped per oracle).
    pub fn set_oracle(&mut self, oracle: Arc<dyn AccuracyOracle>) {
        self.oracle = oracle;
    }

    pub fn evaluate(&self, arch: &Architecture, iteration: u32) -> Result<EvalReport, EvalError> {
        Ok(self.evaluate_batch(std::slice::from_ref(arch), iteration)?.remove(0))
    }

    /// Scores every candidate. Identical architectures within a batch are
    /// assessed once, so counters do not depend on the worker count.
    pub fn evaluate_batch(&self, archs: &[Architecture], iteration: u32) -> Result<Vec<EvalReport>, EvalError> {
        let scope = self.oracle.scope();
        let mut pre = Vec::with_capacity(archs.len());
        let mut todo: Vec<(CacheKey, &Architecture)> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            for a in archs {
                let class = a.classify_degenerate(&self.limits);
                if !class.is_valid() {
                    pre.push((class, 0, None));
                    continue;
                }
                let params = a.param_count()?;
                if compression_ratio(params, self.params_teacher)? == 0.0 {
                    pre.push((class, params, None));
                    continue;
                }
                let key = (scope, text_digest(&a.to_string()));
                if !cache.contains_key(&key) && !todo.iter().any(|(k, _)| *k == key) {
                    todo.push((key, a));
                }
                pre.push((class, params, Some(key)));
            }
        }
        let fresh: Vec<(CacheKey, Assessment)> =
            self.pool.install(|| todo.par_iter().map(|(k, a)| (*k, self.oracle.assess(a))).collect());
        let mut cache = self.cache.lock().expect("cache lock");
        let mut first_use: HashMap<CacheKey, bool> = fresh.iter().map(|(k, _)| (*k, true)).collect();
        for (k, a) in fresh {
            cache.insert(k, a);
        }
        let mut out = Vec::with_capacity(archs.len());
        for (class, params, key) in pre {
            EvalCounters::bump(&self.counters.evaluations);
            let mut report = EvalReport {
                accuracy: f64::NAN,
                params,
                degenerate: class,
                wall_seconds: 0.0,
                reward: PENALTY,
                compression: 0.0,
                constraint_satisfied: false,
                diverged: false,
            };
            if !class.is_valid() {
                EvalCounters::bump(&self.counters.degenerate_skips);
                out.push(report);
                continue;
            }
            if let Some(key) = key {
                let a = cache[&key];
                match first_use.get_mut(&key) {
                    Some(first) if *first => {
                        *first = false;
                        report.wall_seconds = a.wall_seconds;
                        if a.trained {
                            EvalCounters::bump(&self.counters.trainings);
                        }
                    }
                    _ => EvalCounters::bump(&self.counters.cache_hits),
                }
                report.accuracy = a.accuracy;
                report.diverged = a.diverged;
            }
            if report.diverged {
                report.compression = compression_ratio(params, self.params_teacher)?;
                out.push(report);
                continue;
            }
            let rec = score(params, self.params_teacher, report.accuracy, class, &self.reward, iteration)?;
            report.reward = rec.reward;
            report.compression = rec.compression;
            report.constraint_satisfied = rec.constraint_satisfied;
            out.push(report);
        }
        Ok(out)
    }

    /// Writes cached assessments as `scope digest accuracy diverged` lines.
    pub fn save_cache(&self, path: &Path) -> Result<(), EvalError> {
        let cache = self.cache.lock().expect("cache lock");
        let mut rows: Vec<_> = cache.iter().collect();
        rows.sort_by_key(|(k, _)| **k);
        let text: String = rows
            .iter()
            .map(|((s, d), a)| format!("{s:016x} {d:016x} {:?} {}\n", a.accuracy, a.diverged))
            .collect();
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Merges entries written by [`Evaluator::save_cache`].
    pub fn load_cache(&self, path: &Path) -> Result<usize, EvalError> {
        let text = std::fs::read_to_string(path)?;
        let mut cache = self.cache.lock().expect("cache lock");
        let mut n = 0;
        for (i, line) in text.lines().enumerate() {
            let bad = || EvalError::Corrupt(format!("{}: line {}", path.display(), i + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let scope = u64::from_str_radix(f[0], 16).map_err(|_| bad())?;
            let digest = u64::from_str_radix(f[1], 16).map_err(|_| bad())?;
            let accuracy: f64 = f[2].parse().map_err(|_| bad())?;
            let diverged: bool = f[3].parse().map_err(|_| bad())?;
            cache.insert((scope, digest), Assessment { accuracy, diverged, trained: false, wall_seconds: 0.0 });
            n += 1;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{presets, LayerSpec, RemovalMask, Shape};
    use crate::reward::{Constraint, ConstraintMode};

    fn surrogate_eval(cfg: RewardConfig) -> Evaluator {
        let t = presets::surrogate_teacher_a();
        let p = t.param_count().unwrap();
        let oracle = Arc::new(SurrogateModel::new(t, cfg.a_teacher));
        Evaluator::new(oracle, p, cfg, DegeneracyLimits::default(), 2).unwrap()
    }

    /// Counts calls and returns a fixed accuracy.
    struct Fixed(AtomicU64, f64, bool);

    impl AccuracyOracle for Fixed {
        fn assess(&self, _: &Architecture) -> Assessment {
            self.0.fetch_add(1, Ordering::Relaxed);
            Assessment { accuracy: self.1, diverged: self.2, trained: true, wall_seconds: 0.0 }
        }
        fn scope(&self) -> u64 {
            0
        }
    }

    #[test]
    fn teacher_scores_zero_without_training() {
        let ev = surrogate_eval(RewardConfig::unconstrained(0.9));
        let r = ev.evaluate(&presets::surrogate_teacher_a(), 0).unwrap();
        assert_eq!((r.reward, r.compression), (0.0, 0.0));
        assert_eq!(r.degenerate, DegeneracyClass::Valid);
        assert!(r.accuracy.is_nan());
        assert_eq!(ev.counters.snapshot().trainings, 0);
    }

    #[test]
    fn degenerate_candidates_are_never_assessed() {
        let t = presets::residual_teacher();
        let oracle = Arc::new(Fixed(AtomicU64::new(0), 0.5, false));
        let ev = Evaluator::new(
            oracle.clone(),
            t.param_count().unwrap(),
            RewardConfig::unconstrained(0.9),
            DegeneracyLimits::default(),
            1,
        )
        .unwrap();
        let empty = t.apply_removal(&RemovalMask::all_remove(t.len())).unwrap();
        let mut mismatch = t.clone();
        let end = mismatch.blocks[0].end;
        let conv = (mismatch.blocks[0].start..=end).rev().find(|&i| mismatch.layers[i].n_out > 0).unwrap();
        mismatch.layers[conv].n_out += 1;
        let reports = ev.evaluate_batch(&[empty, mismatch], 0).unwrap();
        assert_eq!(reports[0].degenerate, DegeneracyClass::EmptyArchitecture);
        assert_eq!(reports[1].degenerate, DegeneracyClass::BlockMismatch);
        assert!(reports.iter().all(|r| r.reward == -1.0));
        assert_eq!(oracle.0.load(Ordering::Relaxed), 0);
        let c = ev.counters.snapshot();
        assert_eq!((c.evaluations, c.trainings, c.degenerate_skips), (2, 0, 2));
    }

    #[test]
    fn duplicates_and_repeats_hit_the_cache() {
        let t = presets::surrogate_teacher_a();
        let oracle = Arc::new(Fixed(AtomicU64::new(0), 0.8, false));
        let ev =
            Evaluator::new(oracle.clone(), t.param_count().unwrap(), RewardConfig::unconstrained(0.9), DegeneracyLimits::default(), 3)
                .unwrap();
        let mut keep = vec![true; t.len()];
        keep[6] = false;
        let s = t.apply_removal(&RemovalMask { keep }).unwrap();
        let batch = vec![s.clone(), s.clone(), s.clone()];
        let a = ev.evaluate_batch(&batch, 0).unwrap();
        let b = ev.evaluate_batch(&batch, 1).unwrap();
        assert_eq!(oracle.0.load(Ordering::Relaxed), 1);
        assert_eq!(a, b);
        let c = ev.counters.snapshot();
        assert_eq!((c.evaluations, c.trainings, c.cache_hits), (6, 1, 5));

        let dir = tempfile::tempdir().unwrap();
        ev.save_cache(&dir.path().join("cache")).unwrap();
        let fresh = Arc::new(Fixed(AtomicU64::new(0), 0.1, false));
        let ev2 =
            Evaluator::new(fresh.clone(), t.param_count().unwrap(), RewardConfig::unconstrained(0.9), DegeneracyLimits::default(), 1)
                .unwrap();
        assert_eq!(ev2.load_cache(&dir.path().join("cache")).unwrap(), 1);
        assert_eq!(ev2.evaluate(&s, 0).unwrap().reward, a[0].reward);
        assert_eq!(fresh.0.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn divergence_scores_minus_one() {
        let t = presets::surrogate_teacher_a();
        let oracle = Arc::new(Fixed(AtomicU64::new(0), f64::NAN, true));
        let ev = Evaluator::new(oracle, t.param_count().unwrap(), RewardConfig::unconstrained(0.9), DegeneracyLimits::default(), 1)
            .unwrap();
        let mut keep = vec![true; t.len()];
        keep[3] = false;
        let r = ev.evaluate(&t.apply_removal(&RemovalMask { keep }).unwrap(), 0).unwrap();
        assert_eq!(r.reward, -1.0);
        assert_eq!(r.status(), "Diverged");
        assert_eq!(r.recompute_reward(ev.params_teacher, &ev.reward, 0).unwrap(), -1.0);
    }

    #[test]
    fn stored_rewards_recompute_exactly() {
        let t = presets::surrogate_teacher_a();
        let mut cfg = RewardConfig::unconstrained(0.95);
        cfg.constraints = vec![Constraint::max_params(20_000.0)];
        for mode in [ConstraintMode::None, ConstraintMode::Hard, ConstraintMode::Annealed] {
            cfg.mode = mode;
            cfg.t_anneal = 4;
            let ev = surrogate_eval(cfg.clone());
            let n = t.len();
            let archs: Vec<_> = (0..1u32 << n)
                .map(|bits| t.apply_removal(&RemovalMask { keep: (0..n).map(|i| bits >> i & 1 == 1).collect() }).unwrap())
                .collect();
            for it in 0..6 {
                for r in ev.evaluate_batch(&archs, it).unwrap() {
                    assert_eq!(r.recompute_reward(ev.params_teacher, &cfg, it).unwrap().to_bits(), r.reward.to_bits());
                }
            }
        }
    }

    #[test]
    fn large_flatten_is_degenerate() {
        let arch = Architecture::new(vec![LayerSpec::conv(64, 3, 1, 1), LayerSpec::linear(10)], Shape::new(1, 28, 28), 10, vec![])
            .unwrap();
        let ev = surrogate_eval(RewardConfig::unconstrained(0.9));
        let r = ev.evaluate(&arch, 0).unwrap();
        assert_eq!((r.degenerate, r.reward), (DegeneracyClass::LargeFC, -1.0));
    }
}

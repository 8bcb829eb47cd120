use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{AccuracyOracle, Assessment, EvalError};
use crate::arch::Architecture;
use crate::data::{DataSource, Dataset};
use crate::engine::tensorfile::{load_into, load_tensors, net_tensors, save_tensors, NamedTensor};
use crate::engine::{build_network, evaluate_accuracy, predict_logits, train, EngineError, LossSpec, TrainConfig, TrainableNet};
use crate::seed::{derive_seed, text_digest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Share of the examples held out for accuracy measurements.
    pub val_fraction: f64,
}

impl Default for TeacherSettings {
    fn default() -> Self {
        TeacherSettings { epochs: 10, batch_size: 64, lr: 1e-3, seed: 0, val_fraction: 0.1 }
    }
}

/// Contents of `meta.toml` in a teacher directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherMeta {
    pub a_teacher: f64,
    pub params_teacher: u64,
    pub settings: TeacherSettings,
    pub source: DataSource,
}

/// A trained teacher with its data splits. The training split carries the
/// teacher's logits for distillation; accuracies are measured on `val`.
#[derive(Debug, Clone)]
pub struct TeacherContext {
    pub arch: Architecture,
    pub net: TrainableNet<f32>,
    pub train: Dataset,
    pub val: Dataset,
    pub meta: TeacherMeta,
}

const ARCH_FILE: &str = "teacher.arch";
const WEIGHTS_FILE: &str = "weights.tnsr";
const LOGITS_FILE: &str = "logits.tnsr";
const META_FILE: &str = "meta.toml";

fn splits(source: &DataSource, s: &TeacherSettings) -> Result<(Dataset, Dataset), EvalError> {
    let data = source.load()?;
    Ok(data.split(s.val_fraction, derive_seed(s.seed, &[0]))?)
}

/// Trains `arch` on hard labels and caches its logits over the training split.
pub fn train_teacher(
    arch: &Architecture,
    source: &DataSource,
    settings: &TeacherSettings,
) -> Result<TeacherContext, EvalError> {
    let (train_split, val) = splits(source, settings)?;
    let mut net = build_network::<f32>(arch, derive_seed(settings.seed, &[1]))?;
    let cfg = TrainConfig {
        epochs: settings.epochs,
        batch_size: settings.batch_size,
        lr: settings.lr,
        seed: derive_seed(settings.seed, &[2]),
        ..Default::default()
    };
    let stats = train(&mut net, &train_split, &LossSpec::HARD, &cfg)?;
    log::info!("teacher epoch losses {:?}", stats.epoch_losses);
    let a_teacher = evaluate_accuracy(&net, &val)?;
    let logits = predict_logits(&net, &train_split)?;
    let meta = TeacherMeta {
        a_teacher,
        params_teacher: arch.param_count()?,
        settings: settings.clone(),
        source: source.clone(),
    };
    Ok(TeacherContext { arch: arch.clone(), net, train: train_split.with_teacher_logits(logits)?, val, meta })
}

impl TeacherContext {
    pub fn a_teacher(&self) -> f64 {
        self.meta.a_teacher
    }

    pub fn params_teacher(&self) -> u64 {
        self.meta.params_teacher
    }

    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ARCH_FILE), self.arch.to_string())?;
        save_tensors(&dir.join(WEIGHTS_FILE), &net_tensors(&self.net))?;
        let z = self.train.teacher_logits.clone().unwrap_or_default();
        let dims = vec![self.train.len() as u64, self.train.n_classes as u64];
        save_tensors(&dir.join(LOGITS_FILE), &[NamedTensor::new("logits", dims, z)])?;
        std::fs::write(dir.join(META_FILE), toml::to_string(&self.meta)?)?;
        Ok(())
    }

    /// Rebuilds the context: weights and logits from disk, splits by
    /// reloading the recorded data source.
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let arch: Architecture = std::fs::read_to_string(dir.join(ARCH_FILE))?.parse()?;
        let meta: TeacherMeta = toml::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        let mut net = build_network::<f32>(&arch, 0)?;
        load_into(&mut net, &load_tensors(&dir.join(WEIGHTS_FILE))?)?;
        let (train_split, val) = splits(&meta.source, &meta.settings)?;
        let z = load_tensors(&dir.join(LOGITS_FILE))?
            .into_iter()
            .find(|t| t.name == "logits")
            .ok_or_else(|| EvalError::Corrupt("logits container has no `logits` tensor".into()))?;
        let train_split = train_split.with_teacher_logits(z.data)?;
        Ok(TeacherContext { arch, net, train: train_split, val, meta })
    }
}

/// Scores candidates by distilling them from the teacher's cached logits
/// and measuring validation accuracy.
#[derive(Debug, Clone)]
pub struct DistillOracle {
    pub ctx: Arc<TeacherContext>,
    pub train_cfg: TrainConfig,
    pub loss: LossSpec,
    pub seed: u64,
}

impl DistillOracle {
    /// `epochs` of distillation per candidate with batch 64 and Adam at 1e-3.
    pub fn new(ctx: Arc<TeacherContext>, epochs: usize, seed: u64) -> Self {
        DistillOracle { ctx, train_cfg: TrainConfig { epochs, ..Default::default() }, loss: LossSpec::KD, seed }
    }

    fn run(&self, arch: &Architecture) -> Result<f64, EngineError> {
        let s = derive_seed(self.seed, &[text_digest(&arch.to_string())]);
        let mut net = build_network::<f32>(arch, s)?;
        let cfg = TrainConfig { seed: derive_seed(s, &[1]), ..self.train_cfg.clone() };
        train(&mut net, &self.ctx.train, &self.loss, &cfg)?;
        evaluate_accuracy(&net, &self.ctx.val)
    }
}

impl AccuracyOracle for DistillOracle {
    fn assess(&self, arch: &Architecture) -> Assessment {
        let start = Instant::now();
        let (accuracy, diverged) = match self.run(arch) {
            Ok(a) => (a, false),
            Err(e) => {
                log::warn!("candidate training failed ({e}); scoring it as degenerate");
                (f64::NAN, true)
            }
        };
        Assessment { accuracy, diverged, trained: true, wall_seconds: start.elapsed().as_secs_f64() }
    }

    fn scope(&self) -> u64 {
        let tag = format!("distill {} {:?} {:?}", self.seed, self.train_cfg, self.loss);
        text_digest(&tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{LayerSpec, Shape};
    use crate::data::SyntheticSpec;

    fn source() -> DataSource {
        DataSource::Synthetic(SyntheticSpec { samples_per_class: 20, image_size: 8, ..Default::default() })
    }

    fn small_teacher() -> Architecture {
        Architecture::new(
            vec![LayerSpec::conv(4, 3, 1, 1), LayerSpec::relu(), LayerSpec::max_pool(2, 2), LayerSpec::linear(10)],
            Shape::new(1, 8, 8),
            10,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn teacher_logits_cover_training_split_and_survive_reload() {
        let settings = TeacherSettings { epochs: 3, seed: 4, ..Default::default() };
        let ctx = train_teacher(&small_teacher(), &source(), &settings).unwrap();
        assert_eq!(ctx.train.len(), 180);
        assert_eq!(ctx.train.teacher_logits.as_ref().unwrap().len(), 180 * 10);
        let again = train_teacher(&small_teacher(), &source(), &settings).unwrap();
        assert_eq!(again.a_teacher(), ctx.a_teacher());

        let dir = tempfile::tempdir().unwrap();
        ctx.save(dir.path()).unwrap();
        let back = TeacherContext::load(dir.path()).unwrap();
        assert_eq!(back.meta, ctx.meta);
        assert_eq!(back.net.layers, ctx.net.layers);
        assert_eq!(back.train, ctx.train);
        assert_eq!(evaluate_accuracy(&back.net, &back.val).unwrap(), ctx.a_teacher());
    }

    #[test]
    fn distillation_is_deterministic_per_architecture() {
        let settings = TeacherSettings { epochs: 3, seed: 4, ..Default::default() };
        let ctx = Arc::new(train_teacher(&small_teacher(), &source(), &settings).unwrap());
        let oracle = DistillOracle::new(ctx, 2, 9);
        let a = oracle.assess(&small_teacher());
        let b = oracle.assess(&small_teacher());
        assert!(a.trained && !a.diverged);
        assert_eq!(a.accuracy, b.accuracy);
    }
}

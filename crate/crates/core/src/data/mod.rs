//! In-memory datasets, the IDX container, and synthetic image data.

mod idx;
mod synthetic;

pub use idx::{load_idx, load_mnist, IdxFile, IDX_IMAGES, IDX_LABELS};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::Shape;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset {offset}: found {found:#010x}, expected {expected}")]
    BadMagic { offset: u64, found: u32, expected: String },
    #[error("truncated at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },
    #[error("{0}")]
    Mismatch(String),
    #[error("label {label} at index {index} is outside 0..{n_classes}")]
    LabelRange { index: usize, label: u32, n_classes: usize },
    #[error("dataset is empty")]
    Empty,
}

/// Images stored batch-major as `f32` in `[0, 1]`, with class labels and
/// optional teacher logits (`n x n_classes`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape,
    pub n_classes: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<u32>,
    pub teacher_logits: Option<Vec<f32>>,
}

impl Dataset {
    pub fn new(shape: Shape, n_classes: usize, inputs: Vec<f32>, labels: Vec<u32>) -> Result<Self, DataError> {
        if inputs.len() != labels.len() * shape.numel() {
            return Err(DataError::Mismatch(format!(
                "{} input values for {} labels of shape {:?}",
                inputs.len(),
                labels.len(),
                shape
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= n_classes) {
            return Err(DataError::LabelRange { index, label, n_classes });
        }
        Ok(Dataset { shape, n_classes, inputs, labels, teacher_logits: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let d = self.shape.numel();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn with_teacher_logits(mut self, z: Vec<f32>) -> Result<Self, DataError> {
        if z.len() != self.len() * self.n_classes {
            return Err(DataError::Mismatch(format!("{} logits for {} examples", z.len(), self.len())));
        }
        self.teacher_logits = Some(z);
        Ok(self)
    }

    /// Rows `indices` in the given order, teacher logits included.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.shape.numel();
        let k = self.n_classes;
        let mut inputs = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        let mut z = self.teacher_logits.as_ref().map(|_| Vec::with_capacity(indices.len() * k));
        for &i in indices {
            inputs.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
            if let (Some(dst), Some(src)) = (z.as_mut(), self.teacher_logits.as_ref()) {
                dst.extend_from_slice(&src[i * k..(i + 1) * k]);
            }
        }
        Dataset { shape: self.shape, n_classes: k, inputs, labels, teacher_logits: z }
    }

    /// First `limit` examples.
    pub fn take(&self, limit: usize) -> Dataset {
        self.subset(&(0..limit.min(self.len())).collect::<Vec<_>>())
    }

    /// Seeded shuffle, then the last `val_fraction` of rows become the validation split.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        if n_val == 0 || n_val >= self.len() {
            return Err(DataError::Mismatch(format!(
                "validation fraction {val_fraction} leaves an empty split of {} examples",
                self.len()
            )));
        }
        let cut = self.len() - n_val;
        Ok((self.subset(&idx[..cut]), self.subset(&idx[cut..])))
    }
}

/// Where a run's examples come from. Recorded in teacher metadata so the
/// exact training split can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// A directory holding `train-images-idx3-ubyte` and
    /// `train-labels-idx1-ubyte`, optionally gzipped.
    Mnist { dir: PathBuf, train_limit: Option<usize> },
    Synthetic(SyntheticSpec),
}

fn find_idx(dir: &Path, stem: &str) -> PathBuf {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, DataError> {
        match self {
            DataSource::Mnist { dir, train_limit } => {
                let d = load_mnist(&find_idx(dir, "train-images-idx3-ubyte"), &find_idx(dir, "train-labels-idx1-ubyte"))?;
                Ok(match train_limit {
                    Some(n) => d.take(*n),
                    None => d,
                })
            }
            DataSource::Synthetic(spec) => gen_synthetic(spec),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let inputs = (0..n * 4).map(|i| i as f32).collect();
        let labels = (0..n as u32).map(|i| i % 3).collect();
        Dataset::new(Shape::new(1, 2, 2), 3, inputs, labels).unwrap()
    }

    #[test]
    fn validates_shapes_and_labels() {
        assert!(Dataset::new(Shape::new(1, 2, 2), 3, vec![0.0; 7], vec![0, 1]).is_err());
        assert!(matches!(
            Dataset::new(Shape::new(1, 1, 1), 3, vec![0.0; 2], vec![0, 3]),
            Err(DataError::LabelRange { index: 1, .. })
        ));
        assert!(toy(2).with_teacher_logits(vec![0.0; 5]).is_err());
    }

    #[test]
    fn split_partitions_rows() {
        let d = toy(20).with_teacher_logits((0..60).map(|i| i as f32).collect()).unwrap();
        let (tr, va) = d.split(0.1, 4).unwrap();
        assert_eq!((tr.len(), va.len()), (18, 2));
        let mut firsts: Vec<f32> = tr.inputs.chunks(4).chain(va.inputs.chunks(4)).map(|c| c[0]).collect();
        firsts.sort_by(f32::total_cmp);
        assert_eq!(firsts, (0..20).map(|i| (i * 4) as f32).collect::<Vec<_>>());
        // Logit rows travel with their inputs.
        let z = va.teacher_logits.as_ref().unwrap();
        let row = va.inputs[0] as usize / 4;
        assert_eq!(z[0], (row * 3) as f32);
        assert_eq!(d.split(0.1, 4).unwrap(), (tr, va));
        assert!(toy(3).split(0.01, 0).is_err());
    }

    #[test]
    fn sources_load() {
        let spec = SyntheticSpec { samples_per_class: 3, image_size: 4, ..Default::default() };
        let d = DataSource::Synthetic(spec.clone()).load().unwrap();
        assert_eq!(d, gen_synthetic(&spec).unwrap());
        let missing = DataSource::Mnist { dir: "/nonexistent".into(), train_limit: None };
        assert!(matches!(missing.load(), Err(DataError::Io(_))));
    }
}

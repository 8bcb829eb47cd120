use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, LossSpec};
use super::net::TrainableNet;
use super::scalar::Scalar;
use super::EngineError;
use crate::adam::AdamState;
use crate::data::Dataset;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Drives the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, batch_size: 64, lr: 1e-3, optimizer: Optimizer::Adam, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn check_data<T: Scalar>(net: &TrainableNet<T>, data: &Dataset) -> Result<(), EngineError> {
    if data.is_empty() {
        return Err(EngineError::EmptyData);
    }
    if data.shape != net.arch.input_shape || data.n_classes != net.n_classes() {
        return Err(EngineError::DataMismatch(format!(
            "data {:?} with {} classes, network expects {:?} with {}",
            data.shape,
            data.n_classes,
            net.arch.input_shape,
            net.n_classes()
        )));
    }
    Ok(())
}

fn gather<T: Scalar>(src: &[f32], rows: &[usize], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend(src[r * width..(r + 1) * width].iter().map(|&v| T::of(v as f64)));
    }
    out
}

/// Minibatch training. Shuffles are drawn from `cfg.seed`, so equal inputs
/// give bit-identical weights.
pub fn train<T: Scalar>(
    net: &mut TrainableNet<T>,
    data: &Dataset,
    loss: &LossSpec,
    cfg: &TrainConfig,
) -> Result<TrainStats, EngineError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    check_data(net, data)?;
    let teacher = if loss.needs_teacher() {
        Some(data.teacher_logits.as_deref().ok_or(EngineError::MissingTeacher)?)
    } else {
        None
    };
    let d = data.shape.numel();
    let k = data.n_classes;
    let lr = T::of(cfg.lr);
    let mut opt: Vec<AdamState<T>> = net.tensors().iter().map(|t| AdamState::new(t.len(), lr)).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, rows) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let x = gather::<T>(&data.inputs, rows, d);
            let labels: Vec<u32> = rows.iter().map(|&r| data.labels[r]).collect();
            let z = teacher.map(|t| gather::<T>(t, rows, k));
            let tape = net.forward_train(&x, rows.len())?;
            let (l, dl) = loss_and_grad(loss, tape.logits(), &labels, z.as_deref(), k)?;
            let diverged = EngineError::Diverged { epoch, batch: bi };
            if !l.is_finite() {
                return Err(diverged);
            }
            let grads = net.backward(&tape, &dl);
            net.commit_batch_stats(&tape);
            for ((theta, g), st) in net.tensors_mut().into_iter().zip(&grads).zip(&mut opt) {
                match cfg.optimizer {
                    Optimizer::Adam => st.descend(theta, g).map_err(|_| diverged.clone())?,
                    Optimizer::Sgd => {
                        if g.iter().any(|v| !v.is_finite()) {
                            return Err(diverged);
                        }
                        for (p, &gv) in theta.iter_mut().zip(g) {
                            *p -= lr * gv;
                        }
                    }
                }
            }
            total += l;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainStats { epoch_losses })
}

const EVAL_CHUNK: usize = 500;

/// Inference-mode logits for every example, `n x n_classes`.
pub fn predict_logits<T: Scalar>(net: &TrainableNet<T>, data: &Dataset) -> Result<Vec<T>, EngineError> {
    check_data(net, data)?;
    let d = data.shape.numel();
    let mut out = Vec::with_capacity(data.len() * data.n_classes);
    let all: Vec<usize> = (0..data.len()).collect();
    for rows in all.chunks(EVAL_CHUNK) {
        let x = gather::<T>(&data.inputs, rows, d);
        out.extend(net.forward(&x, rows.len())?);
    }
    Ok(out)
}

/// Fraction of examples whose arg-max logit equals the label.
pub fn evaluate_accuracy<T: Scalar>(net: &TrainableNet<T>, data: &Dataset) -> Result<f64, EngineError> {
    let logits = predict_logits(net, data)?;
    let k = data.n_classes;
    let correct = logits
        .chunks_exact(k)
        .zip(&data.labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == y as usize
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

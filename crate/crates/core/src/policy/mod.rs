//! Recurrent stochastic policies over architecture descriptions.
//!
//! The removal policy is a bidirectional stacked LSTM that emits one
//! Bernoulli keep-probability per layer. The shrink policy is a
//! unidirectional stacked LSTM that consumes the previous action and emits a
//! 10-way categorical over shrink factors 0.1..1.0.

mod checkpoint;
mod lstm;

pub use checkpoint::CheckpointError;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{RemovalMask, ShrinkVector, FEATURE_DIM, SHRINK_LEVELS};
use lstm::{LstmShape, StepCache};

/// Per-step floor applied to log-probabilities.
pub const LOG_PROB_FLOOR: f64 = -30.0;
const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("feature vector {step} has length {got}, policy expects {expected}")]
    FeatureDim { step: usize, expected: usize, got: usize },
    #[error("action sequence of length {actions} does not match {steps} feature steps")]
    Length { actions: usize, steps: usize },
    #[error("policy has no value head")]
    NoValueHead,
    #[error("expected a {expected:?} policy")]
    WrongKind { expected: PolicyKind },
    #[error("non-finite log-probability gradient")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Removal,
    Shrink,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Removal => "removal",
            PolicyKind::Shrink => "shrink",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "removal" => Some(PolicyKind::Removal),
            "shrink" => Some(PolicyKind::Shrink),
            _ => None,
        }
    }
}

/// Affine map from the top-layer hidden state to a scalar value estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Actions {
    Removal(RemovalMask),
    Shrink(ShrinkVector),
}

impl Actions {
    pub fn len(&self) -> usize {
        match self {
            Actions::Removal(m) => m.len(),
            Actions::Shrink(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, t: usize) -> usize {
        match self {
            Actions::Removal(m) => m.keep[t] as usize,
            Actions::Shrink(v) => (v.levels[t] - 1) as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub actions: Actions,
    /// Per-step log-probabilities; frozen steps carry 0.
    pub log_probs: Vec<f64>,
    /// Top-layer hidden vector at each step.
    pub hidden_states: Vec<Vec<f64>>,
    /// Summed per-step entropy over free steps.
    pub entropy: f64,
    /// Steps whose action was imposed rather than sampled.
    pub frozen: Vec<bool>,
}

impl Trajectory {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Result of differentiating a weighted sum of step log-probabilities.
#[derive(Debug, Clone)]
pub struct LogProbGrad {
    pub log_probs: Vec<f64>,
    pub hidden_states: Vec<Vec<f64>>,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentPolicy {
    pub kind: PolicyKind,
    pub n_layers: usize,
    pub hidden_size: usize,
    pub input_size: usize,
    pub weights: Vec<f64>,
    pub value_head: Option<ValueHead>,
}

struct Pass {
    /// caches[layer][dir][t], indexed by sequence position.
    caches: Vec<Vec<Vec<StepCache>>>,
    top: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Log-probability of action `a` under head output `z`, its gradient
/// w.r.t. `z`, and the distribution entropy. The gradient vanishes when the
/// floor is active.
fn step_log_prob(kind: PolicyKind, z: &[f64], a: usize) -> (f64, Vec<f64>, f64) {
    match kind {
        PolicyKind::Removal => {
            let p = sigmoid(z[0]);
            let lp = if a == 1 { log_sigmoid(z[0]) } else { log_sigmoid(-z[0]) };
            let ent = -(p * log_sigmoid(z[0]) + (1.0 - p) * log_sigmoid(-z[0]));
            if lp < LOG_PROB_FLOOR {
                (LOG_PROB_FLOOR, vec![0.0], ent)
            } else {
                (lp, vec![a as f64 - p], ent)
            }
        }
        PolicyKind::Shrink => {
            let ls = log_softmax(z);
            let ent = -ls.iter().map(|l| l.exp() * l).sum::<f64>();
            if ls[a] < LOG_PROB_FLOOR {
                (LOG_PROB_FLOOR, vec![0.0; z.len()], ent)
            } else {
                let g = ls.iter().enumerate().map(|(j, l)| (j == a) as u8 as f64 - l.exp()).collect();
                (ls[a], g, ent)
            }
        }
    }
}

impl RecurrentPolicy {
    /// Removal policy: 2 layers, 30 hidden units, bidirectional.
    pub fn removal(seed: u64) -> Self {
        Self::with_dims(PolicyKind::Removal, 2, 30, seed)
    }

    /// Shrink policy: 2 layers, 50 hidden units, unidirectional.
    pub fn shrink(seed: u64) -> Self {
        Self::with_dims(PolicyKind::Shrink, 2, 50, seed)
    }

    pub fn with_dims(kind: PolicyKind, n_layers: usize, hidden_size: usize, seed: u64) -> Self {
        let input_size = match kind {
            PolicyKind::Removal => FEATURE_DIM,
            PolicyKind::Shrink => FEATURE_DIM + 1,
        };
        let mut p = RecurrentPolicy { kind, n_layers, hidden_size, input_size, weights: Vec::new(), value_head: None };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.weights = (0..p.n_weights()).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect();
        for l in 0..n_layers {
            for d in 0..p.directions() {
                let off = p.block_offset(l, d);
                for i in p.layer_shape(l).forget_bias_range() {
                    p.weights[off + i] = 1.0;
                }
            }
        }
        p
    }

    /// Attaches a zero-initialized value head.
    pub fn with_value_head(mut self) -> Self {
        self.value_head = Some(ValueHead { weights: vec![0.0; self.top_dim()], bias: 0.0 });
        self
    }

    pub fn bidirectional(&self) -> bool {
        self.kind == PolicyKind::Removal
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional() {
            2
        } else {
            1
        }
    }

    pub fn output_size(&self) -> usize {
        match self.kind {
            PolicyKind::Removal => 1,
            PolicyKind::Shrink => SHRINK_LEVELS,
        }
    }

    /// Width of the top-layer hidden state (both directions concatenated).
    pub fn top_dim(&self) -> usize {
        self.hidden_size * self.directions()
    }

    fn layer_shape(&self, layer: usize) -> LstmShape {
        let input = if layer == 0 { self.input_size } else { self.top_dim() };
        LstmShape { input, hidden: self.hidden_size }
    }

    fn block_offset(&self, layer: usize, dir: usize) -> usize {
        let mut off = 0;
        for l in 0..layer {
            off += self.layer_shape(l).len() * self.directions();
        }
        off + dir * self.layer_shape(layer).len()
    }

    fn head_offset(&self) -> usize {
        self.block_offset(self.n_layers, 0)
    }

    pub fn n_weights(&self) -> usize {
        self.head_offset() + self.output_size() * (self.top_dim() + 1)
    }

    fn block(&self, layer: usize, dir: usize) -> &[f64] {
        let off = self.block_offset(layer, dir);
        &self.weights[off..off + self.layer_shape(layer).len()]
    }

    fn head(&self, top: &[f64]) -> Vec<f64> {
        let off = self.head_offset();
        let d = self.top_dim();
        let bias = off + self.output_size() * d;
        (0..self.output_size())
            .map(|o| {
                let row = &self.weights[off + o * d..off + (o + 1) * d];
                row.iter().zip(top).map(|(w, h)| w * h).sum::<f64>() + self.weights[bias + o]
            })
            .collect()
    }

    fn check_features(&self, features: &[Vec<f64>], width: usize) -> Result<(), PolicyError> {
        for (step, f) in features.iter().enumerate() {
            if f.len() != width {
                return Err(PolicyError::FeatureDim { step, expected: width, got: f.len() });
            }
        }
        Ok(())
    }

    fn expect_kind(&self, kind: PolicyKind) -> Result<(), PolicyError> {
        if self.kind != kind {
            return Err(PolicyError::WrongKind { expected: kind });
        }
        Ok(())
    }

    /// Full-sequence forward pass over prepared inputs.
    fn pass(&self, inputs: &[Vec<f64>]) -> Pass {
        let mut caches = Vec::with_capacity(self.n_layers);
        let mut xs = inputs.to_vec();
        for l in 0..self.n_layers {
            let shape = self.layer_shape(l);
            let fwd = lstm::forward_seq(self.block(l, 0), shape, &xs);
            let mut dirs = vec![fwd];
            if self.bidirectional() {
                let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
                let mut bwd = lstm::forward_seq(self.block(l, 1), shape, &rev);
                bwd.reverse();
                dirs.push(bwd);
            }
            xs = (0..inputs.len())
                .map(|t| dirs.iter().flat_map(|d| d[t].h.iter().copied()).collect())
                .collect();
            caches.push(dirs);
        }
        let logits = xs.iter().map(|h| self.head(h)).collect();
        Pass { caches, top: xs, logits }
    }

    /// Backpropagates head-output gradients `dlogits[t]` to all weights.
    fn backprop(&self, pass: &Pass, dlogits: &[Vec<f64>]) -> Vec<f64> {
        let mut grad = vec![0.0; self.n_weights()];
        let n = dlogits.len();
        let d = self.top_dim();
        let head = self.head_offset();
        let bias = head + self.output_size() * d;
        let mut dtop = vec![vec![0.0; d]; n];
        for t in 0..n {
            for (o, &g) in dlogits[t].iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[bias + o] += g;
                for k in 0..d {
                    grad[head + o * d + k] += g * pass.top[t][k];
                    dtop[t][k] += g * self.weights[head + o * d + k];
                }
            }
        }
        let h = self.hidden_size;
        for l in (0..self.n_layers).rev() {
            let shape = self.layer_shape(l);
            let mut dx = vec![vec![0.0; shape.input]; n];
            for dir in 0..self.directions() {
                let off = self.block_offset(l, dir);
                let g = &mut grad[off..off + shape.len()];
                let dh: Vec<Vec<f64>> = dtop.iter().map(|v| v[dir * h..(dir + 1) * h].to_vec()).collect();
                let caches = &pass.caches[l][dir];
                let part = if dir == 0 {
                    lstm::backward_seq(self.block(l, dir), shape, caches, &dh, g)
                } else {
                    let rc: Vec<StepCache> = caches.iter().rev().cloned().collect();
                    let rdh: Vec<Vec<f64>> = dh.into_iter().rev().collect();
                    let mut p = lstm::backward_seq(self.block(l, dir), shape, &rc, &rdh, g);
                    p.reverse();
                    p
                };
                for (acc, v) in dx.iter_mut().zip(part) {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b;
                    }
                }
            }
            dtop = dx;
        }
        grad
    }

    /// Shrink-policy inputs: features with the previous factor appended.
    fn shrink_inputs(features: &[Vec<f64>], levels: &[u8]) -> Vec<Vec<f64>> {
        features
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let prev = if t == 0 { 1.0 } else { levels[t - 1] as f64 / SHRINK_LEVELS as f64 };
                let mut x = f.clone();
                x.push(prev);
                x
            })
            .collect()
    }

    /// Samples a removal mask with every step free.
    pub fn sample_removal(&self, features: &[Vec<f64>], seed: u64) -> Result<Trajectory, PolicyError> {
        self.sample_removal_with(features, &vec![None; features.len()], seed)
    }

    /// Samples a removal mask; steps with `fixed[t] = Some(keep)` take the
    /// imposed action, contribute log-probability 0 and carry no gradient.
    pub fn sample_removal_with(
        &self,
        features: &[Vec<f64>],
        fixed: &[Option<bool>],
        seed: u64,
    ) -> Result<Trajectory, PolicyError> {
        self.expect_kind(PolicyKind::Removal)?;
        self.check_features(features, self.input_size)?;
        if fixed.len() != features.len() {
            return Err(PolicyError::Length { actions: fixed.len(), steps: features.len() });
        }
        let pass = self.pass(features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::with_capacity(features.len());
        let mut log_probs = Vec::with_capacity(features.len());
        let mut entropy = 0.0;
        for (t, z) in pass.logits.iter().enumerate() {
            let u: f64 = rng.gen();
            let k = fixed[t].unwrap_or(u < sigmoid(z[0]));
            keep.push(k);
            if fixed[t].is_some() {
                log_probs.push(0.0);
            } else {
                let (lp, _, ent) = step_log_prob(self.kind, z, k as usize);
                log_probs.push(lp);
                entropy += ent;
            }
        }
        Ok(Trajectory {
            actions: Actions::Removal(RemovalMask { keep }),
            log_probs,
            hidden_states: pass.top,
            entropy,
            frozen: fixed.iter().map(Option::is_some).collect(),
        })
    }

    /// Samples shrink factors autoregressively.
    pub fn sample_shrink(&self, features: &[Vec<f64>], seed: u64) -> Result<Trajectory, PolicyError> {
        self.expect_kind(PolicyKind::Shrink)?;
        self.check_features(features, self.input_size - 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.hidden_size;
        let mut state: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![0.0; h], vec![0.0; h]); self.n_layers];
        let mut levels: Vec<u8> = Vec::with_capacity(features.len());
        let mut log_probs = Vec::with_capacity(features.len());
        let mut hidden_states = Vec::with_capacity(features.len());
        let mut entropy = 0.0;
        for f in features {
            let prev = levels.last().map_or(1.0, |&l| l as f64 / SHRINK_LEVELS as f64);
            let mut x = f.clone();
            x.push(prev);
            for (l, (hs, cs)) in state.iter_mut().enumerate() {
                let c = lstm::step(self.block(l, 0), self.layer_shape(l), &x, hs, cs);
                *hs = c.h.clone();
                *cs = c.c;
                x = c.h;
            }
            let z = self.head(&x);
            let u: f64 = rng.gen();
            let ls = log_softmax(&z);
            let mut acc = 0.0;
            let mut a = SHRINK_LEVELS - 1;
            for (j, l) in ls.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    a = j;
                    break;
                }
            }
            let (lp, _, ent) = step_log_prob(self.kind, &z, a);
            levels.push(a as u8 + 1);
            log_probs.push(lp);
            entropy += ent;
            hidden_states.push(x);
        }
        let n = levels.len();
        Ok(Trajectory {
            actions: Actions::Shrink(ShrinkVector { levels }),
            log_probs,
            hidden_states,
            entropy,
            frozen: vec![false; n],
        })
    }

    fn prepare(&self, features: &[Vec<f64>], actions: &Actions) -> Result<Vec<Vec<f64>>, PolicyError> {
        if actions.len() != features.len() {
            return Err(PolicyError::Length { actions: actions.len(), steps: features.len() });
        }
        match (self.kind, actions) {
            (PolicyKind::Removal, Actions::Removal(_)) => {
                self.check_features(features, self.input_size)?;
                Ok(features.to_vec())
            }
            (PolicyKind::Shrink, Actions::Shrink(v)) => {
                self.check_features(features, self.input_size - 1)?;
                Ok(Self::shrink_inputs(features, &v.levels))
            }
            _ => Err(PolicyError::WrongKind { expected: self.kind }),
        }
    }

    /// Recomputes per-step log-probabilities of `actions`.
    pub fn log_prob_of(&self, features: &[Vec<f64>], actions: &Actions) -> Result<Vec<f64>, PolicyError> {
        let inputs = self.prepare(features, actions)?;
        let pass = self.pass(&inputs);
        Ok(pass.logits.iter().enumerate().map(|(t, z)| step_log_prob(self.kind, z, actions.index(t)).0).collect())
    }

    /// Gradient of `sum_t weights[t] * log p(a_t)` over the non-frozen steps.
    pub fn grad_log_prob(
        &self,
        features: &[Vec<f64>],
        actions: &Actions,
        frozen: &[bool],
        weights: &[f64],
    ) -> Result<LogProbGrad, PolicyError> {
        let inputs = self.prepare(features, actions)?;
        if frozen.len() != inputs.len() || weights.len() != inputs.len() {
            return Err(PolicyError::Length { actions: weights.len().min(frozen.len()), steps: inputs.len() });
        }
        let pass = self.pass(&inputs);
        let mut log_probs = Vec::with_capacity(inputs.len());
        let mut dlogits = Vec::with_capacity(inputs.len());
        for (t, z) in pass.logits.iter().enumerate() {
            if frozen[t] {
                log_probs.push(0.0);
                dlogits.push(vec![0.0; z.len()]);
                continue;
            }
            let (lp, g, _) = step_log_prob(self.kind, z, actions.index(t));
            log_probs.push(lp);
            dlogits.push(g.into_iter().map(|v| v * weights[t]).collect());
        }
        let grad = self.backprop(&pass, &dlogits);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(LogProbGrad { log_probs, hidden_states: pass.top, grad })
    }

    /// Per-step value estimates from stored hidden states.
    pub fn value_of(&self, hidden_states: &[Vec<f64>]) -> Result<Vec<f64>, PolicyError> {
        let v = self.value_head.as_ref().ok_or(PolicyError::NoValueHead)?;
        Ok(hidden_states
            .iter()
            .map(|h| v.weights.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + v.bias)
            .collect())
    }

    /// Per-step keep probabilities (removal) or factor distributions (shrink)
    /// along a given action sequence.
    pub fn step_distributions(&self, features: &[Vec<f64>], actions: &Actions) -> Result<Vec<Vec<f64>>, PolicyError> {
        let inputs = self.prepare(features, actions)?;
        let pass = self.pass(&inputs);
        Ok(pass
            .logits
            .iter()
            .map(|z| match self.kind {
                PolicyKind::Removal => vec![sigmoid(z[0])],
                PolicyKind::Shrink => log_softmax(z).into_iter().map(f64::exp).collect(),
            })
            .collect())
    }

    /// Mutable view of the output-head bias, for forcing distributions.
    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        let start = self.head_offset() + self.output_size() * self.top_dim();
        &mut self.weights[start..]
    }

    /// Mutable view of the output-head weight matrix.
    pub fn head_weights_mut(&mut self) -> &mut [f64] {
        let start = self.head_offset();
        let end = start + self.output_size() * self.top_dim();
        &mut self.weights[start..end]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_features(n: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..width).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
    }

    fn scrambled(mut p: RecurrentPolicy, seed: u64) -> RecurrentPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.weights {
            *w = rng.gen_range(-0.6..0.6);
        }
        p
    }

    fn uniform(mut p: RecurrentPolicy) -> RecurrentPolicy {
        p.head_weights_mut().iter_mut().for_each(|w| *w = 0.0);
        p.head_bias_mut().iter_mut().for_each(|w| *w = 0.0);
        p
    }

    #[test]
    fn default_policy_sizes() {
        let r = RecurrentPolicy::removal(0);
        assert_eq!((r.n_layers, r.hidden_size, r.input_size, r.top_dim()), (2, 30, 12, 60));
        let s = RecurrentPolicy::shrink(0);
        assert_eq!((s.n_layers, s.hidden_size, s.input_size, s.top_dim()), (2, 50, 13, 50));
        assert_eq!(s.output_size(), 10);
        // Forget biases at 1, everything else within the init range.
        let ones = r.weights.iter().filter(|&&w| w == 1.0).count();
        assert_eq!(ones, 2 * 2 * 30);
        assert!(r.weights.iter().all(|&w| w == 1.0 || w.abs() <= INIT_RANGE));
    }

    #[test]
    fn saturated_policy_keeps_everything() {
        let mut p = RecurrentPolicy::removal(1);
        p.head_weights_mut().iter_mut().for_each(|w| *w = 0.0);
        p.head_bias_mut()[0] = 60.0;
        let f = random_features(5, FEATURE_DIM, 2);
        let t = p.sample_removal(&f, 9).unwrap();
        assert_eq!(t.actions, Actions::Removal(RemovalMask::all_keep(5)));
        assert!(t.log_probs.iter().all(|&l| l == 0.0 || l.abs() < 1e-25));
        // A contradicting action is floored.
        let lp = p.log_prob_of(&f, &Actions::Removal(RemovalMask::all_remove(5))).unwrap();
        assert!(lp.iter().all(|&l| l == LOG_PROB_FLOOR));
    }

    #[test]
    fn uniform_closed_forms() {
        let p = uniform(RecurrentPolicy::removal(3));
        let f = random_features(3, FEATURE_DIM, 4);
        for seed in 0..8 {
            let t = p.sample_removal(&f, seed).unwrap();
            assert!((t.total_log_prob() - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        }
        let s = uniform(RecurrentPolicy::shrink(3));
        let f = random_features(4, FEATURE_DIM, 5);
        let t = s.sample_shrink(&f, 1).unwrap();
        for lp in &t.log_probs {
            assert!((lp - 0.1f64.ln()).abs() < 1e-12);
        }
        let empty = s.sample_shrink(&[], 1).unwrap();
        assert!(empty.actions.is_empty());
        assert_eq!(empty.total_log_prob(), 0.0);
    }

    #[test]
    fn sampling_is_deterministic_and_replays() {
        let p = scrambled(RecurrentPolicy::removal(0), 11);
        let f = random_features(6, FEATURE_DIM, 6);
        let a = p.sample_removal(&f, 42).unwrap();
        assert_eq!(a, p.sample_removal(&f, 42).unwrap());
        assert_eq!(p.log_prob_of(&f, &a.actions).unwrap(), a.log_probs);

        let s = scrambled(RecurrentPolicy::shrink(0), 12);
        let f = random_features(7, FEATURE_DIM, 7);
        let b = s.sample_shrink(&f, 42).unwrap();
        assert_eq!(b, s.sample_shrink(&f, 42).unwrap());
        assert_eq!(s.log_prob_of(&f, &b.actions).unwrap(), b.log_probs);
        let g = s.grad_log_prob(&f, &b.actions, &b.frozen, &vec![1.0; 7]).unwrap();
        assert_eq!(g.hidden_states, b.hidden_states);
    }

    #[test]
    fn rejects_bad_feature_width() {
        let p = RecurrentPolicy::removal(0);
        let err = p.sample_removal(&[vec![0.0; 5]], 0).unwrap_err();
        assert_eq!(err, PolicyError::FeatureDim { step: 0, expected: 12, got: 5 });
        let s = RecurrentPolicy::shrink(0);
        assert!(s.sample_shrink(&[vec![0.0; 13]], 0).is_err());
        let f = random_features(3, FEATURE_DIM, 0);
        assert!(matches!(
            p.log_prob_of(&f, &Actions::Removal(RemovalMask::all_keep(2))),
            Err(PolicyError::Length { .. })
        ));
    }

    #[test]
    fn frozen_steps_are_imposed() {
        let p = scrambled(RecurrentPolicy::removal(0), 3);
        let f = random_features(4, FEATURE_DIM, 1);
        let fixed = [None, Some(false), None, Some(true)];
        for seed in 0..20 {
            let t = p.sample_removal_with(&f, &fixed, seed).unwrap();
            let Actions::Removal(m) = &t.actions else { unreachable!() };
            assert!(!m.keep[1] && m.keep[3]);
            assert_eq!(t.log_probs[1], 0.0);
            assert_eq!(t.log_probs[3], 0.0);
        }
    }

    fn check_gradient(p: &RecurrentPolicy, f: &[Vec<f64>], actions: &Actions) {
        let n = actions.len();
        let w: Vec<f64> = (0..n).map(|t| 0.5 + t as f64 * 0.3).collect();
        let g = p.grad_log_prob(f, actions, &vec![false; n], &w).unwrap();
        let objective = |q: &RecurrentPolicy| -> f64 {
            q.log_prob_of(f, actions).unwrap().iter().zip(&w).map(|(l, w)| l * w).sum()
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..p.weights.len() {
            let mut plus = p.clone();
            plus.weights[i] += h;
            let mut minus = p.clone();
            minus.weights[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (fd - g.grad[i]).abs() / fd.abs().max(g.grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn removal_gradient_matches_finite_differences() {
        let p = scrambled(RecurrentPolicy::with_dims(PolicyKind::Removal, 2, 5, 0), 21);
        let f = random_features(4, FEATURE_DIM, 8);
        let t = p.sample_removal(&f, 3).unwrap();
        check_gradient(&p, &f, &t.actions);
    }

    #[test]
    fn shrink_gradient_matches_finite_differences() {
        let p = scrambled(RecurrentPolicy::with_dims(PolicyKind::Shrink, 2, 6, 0), 22);
        let f = random_features(4, FEATURE_DIM, 9);
        let t = p.sample_shrink(&f, 5).unwrap();
        check_gradient(&p, &f, &t.actions);
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        let p = scrambled(RecurrentPolicy::with_dims(PolicyKind::Removal, 1, 4, 0), 5);
        let f = random_features(3, FEATURE_DIM, 2);
        let probs = p.step_distributions(&f, &Actions::Removal(RemovalMask::all_keep(3))).unwrap();
        let n = 10_000;
        let mut counts = [0usize; 3];
        for seed in 0..n {
            let t = p.sample_removal(&f, seed).unwrap();
            let Actions::Removal(m) = t.actions else { unreachable!() };
            for (c, k) in counts.iter_mut().zip(m.keep) {
                *c += k as usize;
            }
        }
        for (c, pr) in counts.iter().zip(&probs) {
            let pr = pr[0];
            let se = (pr * (1.0 - pr) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - pr).abs() < 3.0 * se, "freq {c} vs p {pr}");
        }
    }

    #[test]
    fn shrink_first_step_frequencies_match() {
        let p = scrambled(RecurrentPolicy::with_dims(PolicyKind::Shrink, 1, 4, 0), 6);
        let f = random_features(1, FEATURE_DIM, 3);
        let probs = &p.step_distributions(&f, &Actions::Shrink(ShrinkVector::identity(1))).unwrap()[0];
        let n = 10_000u64;
        let mut counts = [0usize; SHRINK_LEVELS];
        for seed in 0..n {
            let Actions::Shrink(v) = p.sample_shrink(&f, seed).unwrap().actions else { unreachable!() };
            counts[(v.levels[0] - 1) as usize] += 1;
        }
        for (c, pr) in counts.iter().zip(probs) {
            let se = (pr * (1.0 - pr) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - pr).abs() < 3.0 * se);
        }
    }

    #[test]
    fn shrink_shares_parameters_across_time() {
        // Cutting the recurrence (zero recurrent matrix, closed forget gate)
        // leaves each step a function of its own input, and that function must
        // be the same at every position.
        let mut p = scrambled(RecurrentPolicy::with_dims(PolicyKind::Shrink, 1, 4, 0), 7);
        let shape = p.layer_shape(0);
        let whh = shape.input * 4 * shape.hidden..shape.input * 4 * shape.hidden + 4 * shape.hidden * shape.hidden;
        p.weights[whh].iter_mut().for_each(|w| *w = 0.0);
        for i in shape.forget_bias_range() {
            p.weights[i] = -1e3;
        }
        let x = random_features(1, FEATURE_DIM, 1).remove(0);
        let y = random_features(1, FEATURE_DIM, 2).remove(0);
        let acts = Actions::Shrink(ShrinkVector { levels: vec![10, 10, 10] });
        let d1 = p.step_distributions(&[x.clone(), y.clone(), x.clone()], &acts).unwrap();
        let d2 = p.step_distributions(&[y.clone(), x.clone(), y.clone()], &acts).unwrap();
        assert_eq!(d1[0], d2[1]);
        assert_eq!(d1[1], d2[0]);
        assert_eq!(d1[2], d2[1]);
    }

    #[test]
    fn value_head_behaviour() {
        let p = RecurrentPolicy::removal(0);
        assert_eq!(p.value_of(&[vec![0.0; 60]]), Err(PolicyError::NoValueHead));
        let p = p.with_value_head();
        let hs = vec![vec![0.3; 60], vec![0.3; 60]];
        assert_eq!(p.value_of(&hs).unwrap(), vec![0.0, 0.0]);
        let mut q = p.clone();
        q.value_head.as_mut().unwrap().weights[0] = 2.0;
        let v = q.value_of(&hs).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(q.value_of(&hs[..1]).unwrap().len(), 1);
    }
}

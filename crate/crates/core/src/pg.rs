//! REINFORCE with an exponential-moving-average baseline, and the
//! actor-critic variant with a learned per-step value estimate.

use thiserror::Error;

use crate::policy::{PolicyError, RecurrentPolicy, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum PgError {
    #[error("empty rollout batch")]
    Empty,
    #[error("{0} rewards for {1} trajectories")]
    Mismatch(usize, usize),
    #[error("baseline used before initialization")]
    Uninitialized,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineState {
    pub value: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl BaselineState {
    pub fn new(decay: f64) -> Self {
        BaselineState { value: 0.0, decay, initialized: false }
    }

    /// `b <- decay * b + (1 - decay) * mean`; the first call sets `b <- mean`.
    pub fn update(&mut self, batch_mean: f64) {
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean;
        } else {
            self.value = batch_mean;
            self.initialized = true;
        }
    }

    /// The value to subtract for a batch with mean reward `batch_mean`:
    /// the batch mean itself before the first update.
    pub fn current_or(&self, batch_mean: f64) -> f64 {
        if self.initialized {
            self.value
        } else {
            batch_mean
        }
    }
}

/// m rollouts that share one feature sequence.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub features: Vec<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
}

impl RolloutBatch {
    fn check(&self) -> Result<(), PgError> {
        if self.trajectories.is_empty() {
            return Err(PgError::Empty);
        }
        if self.rewards.len() != self.trajectories.len() {
            return Err(PgError::Mismatch(self.rewards.len(), self.trajectories.len()));
        }
        Ok(())
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// `(1/m) sum_k sum_t grad log p(a_t) (R_k - b)`, an ascent direction.
pub fn reinforce_gradient(policy: &RecurrentPolicy, batch: &RolloutBatch, baseline: f64) -> Result<Vec<f64>, PgError> {
    batch.check()?;
    let m = batch.trajectories.len() as f64;
    let mut grad = vec![0.0; policy.n_weights()];
    for (traj, &r) in batch.trajectories.iter().zip(&batch.rewards) {
        let adv = (r - baseline) / m;
        if adv == 0.0 || traj.actions.is_empty() {
            continue;
        }
        let w = vec![adv; traj.actions.len()];
        let g = policy.grad_log_prob(&batch.features, &traj.actions, &traj.frozen, &w)?;
        for (a, b) in grad.iter_mut().zip(g.grad) {
            *a += b;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticGrad {
    /// Ascent direction for the policy weights.
    pub policy: Vec<f64>,
    /// Gradient of the critic's mean squared error w.r.t. the value-head
    /// weights followed by its bias (a descent direction).
    pub critic: Vec<f64>,
    pub critic_loss: f64,
}

/// Policy term uses per-step advantages `R_k - V_{k,t}` held constant; the
/// critic term differentiates the mean squared error over all free steps.
pub fn actor_critic_gradient(policy: &RecurrentPolicy, batch: &RolloutBatch) -> Result<ActorCriticGrad, PgError> {
    batch.check()?;
    let head = policy.value_head.as_ref().ok_or(PolicyError::NoValueHead)?;
    let m = batch.trajectories.len() as f64;
    let mut grad = vec![0.0; policy.n_weights()];
    let mut critic = vec![0.0; head.weights.len() + 1];
    let n_steps: usize = batch.trajectories.iter().map(|t| t.frozen.iter().filter(|f| !**f).count()).sum();
    let mut loss = 0.0;
    for (traj, &r) in batch.trajectories.iter().zip(&batch.rewards) {
        if traj.actions.is_empty() {
            continue;
        }
        let values = policy.value_of(&traj.hidden_states)?;
        let w: Vec<f64> = values.iter().map(|v| (r - v) / m).collect();
        if w.iter().any(|&x| x != 0.0) {
            let g = policy.grad_log_prob(&batch.features, &traj.actions, &traj.frozen, &w)?;
            for (a, b) in grad.iter_mut().zip(g.grad) {
                *a += b;
            }
        }
        for ((v, h), frozen) in values.iter().zip(&traj.hidden_states).zip(&traj.frozen) {
            if *frozen {
                continue;
            }
            let e = v - r;
            loss += e * e / n_steps as f64;
            let s = 2.0 * e / n_steps as f64;
            for (c, x) in critic.iter_mut().zip(h) {
                *c += s * x;
            }
            *critic.last_mut().unwrap() += s;
        }
    }
    Ok(ActorCriticGrad { policy: grad, critic, critic_loss: loss })
}

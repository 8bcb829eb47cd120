//! Adam with bias correction.

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdamError {
    #[error("parameter/gradient length mismatch: state {state}, params {params}, grad {grad}")]
    Shape { state: usize, params: usize, grad: usize },
    #[error("non-finite gradient entry at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps_hat: T,
}

impl<T: Float> AdamState<T> {
    pub fn new(n_params: usize, lr: T) -> Self {
        AdamState {
            first_moment: vec![T::zero(); n_params],
            second_moment: vec![T::zero(); n_params],
            step_count: 0,
            lr,
            beta1: T::from(0.9).unwrap(),
            beta2: T::from(0.999).unwrap(),
            eps_hat: T::from(1e-8).unwrap(),
        }
    }

    /// Moves `theta` along `grad` (maximization).
    pub fn ascend(&mut self, theta: &mut [T], grad: &[T]) -> Result<(), AdamError> {
        self.step(theta, grad, T::one())
    }

    /// Moves `theta` against `grad` (minimization).
    pub fn descend(&mut self, theta: &mut [T], grad: &[T]) -> Result<(), AdamError> {
        self.step(theta, grad, -T::one())
    }

    fn step(&mut self, theta: &mut [T], grad: &[T], sign: T) -> Result<(), AdamError> {
        let n = self.first_moment.len();
        if theta.len() != n || grad.len() != n {
            return Err(AdamError::Shape { state: n, params: theta.len(), grad: grad.len() });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(AdamError::NonFinite(i));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let one = T::one();
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for i in 0..n {
            let g = grad[i];
            let m = self.beta1 * self.first_moment[i] + (one - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (one - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            theta[i] = theta[i] + sign * self.lr * m_hat / (v_hat.sqrt() + self.eps_hat);
        }
        Ok(())
    }
}

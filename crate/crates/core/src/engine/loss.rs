use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Cross-entropy against hard labels.
    Hard,
    /// Squared distance to teacher logits.
    Kd,
    /// Cross-entropy plus `lambda` times the distillation term.
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub mode: LossMode,
    pub lambda: f64,
}

impl LossSpec {
    pub const HARD: LossSpec = LossSpec { mode: LossMode::Hard, lambda: 0.0 };
    pub const KD: LossSpec = LossSpec { mode: LossMode::Kd, lambda: 0.0 };

    pub fn combined(lambda: f64) -> Self {
        LossSpec { mode: LossMode::Combined, lambda }
    }

    pub fn needs_teacher(&self) -> bool {
        self.mode != LossMode::Hard
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[u32], k: usize) -> (f64, Vec<T>) {
    let n = labels.len();
    let inv_n = T::of(1.0 / n as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    for ((row, g), &y) in logits.chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - m).exp();
            sum += *gj;
        }
        loss += (sum.ln() + m - row[y as usize]).f64();
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_n;
        }
        g[y as usize] -= inv_n;
    }
    (loss / n as f64, grad)
}

/// Loss value and logit gradient for a batch. `teacher` must be present for
/// the distillation modes.
pub fn loss_and_grad<T: Scalar>(
    spec: &LossSpec,
    logits: &[T],
    labels: &[u32],
    teacher: Option<&[T]>,
    k: usize,
) -> Result<(f64, Vec<T>), EngineError> {
    let n = labels.len();
    let kd = |z: &[T]| kd_loss(logits, z, n);
    match spec.mode {
        LossMode::Hard => Ok(softmax_cross_entropy(logits, labels, k)),
        LossMode::Kd => Ok(kd(teacher.ok_or(EngineError::MissingTeacher)?)),
        LossMode::Combined => {
            let z = teacher.ok_or(EngineError::MissingTeacher)?;
            let (ce, mut g) = softmax_cross_entropy(logits, labels, k);
            let (d, gd) = kd(z);
            let lam = T::of(spec.lambda);
            for (a, b) in g.iter_mut().zip(gd) {
                *a += lam * b;
            }
            Ok((ce + spec.lambda * d, g))
        }
    }
}

/// Mean over `n` rows of `||logits - z||^2`, with gradient `2 (logits - z) / n`.
pub fn kd_loss<T: Scalar>(logits: &[T], z: &[T], n: usize) -> (f64, Vec<T>) {
    let scale = T::of(2.0 / n as f64);
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(z)
        .map(|(&f, &t)| {
            let d = f - t;
            loss += (d * d).f64();
            scale * d
        })
        .collect();
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kd_examples() {
        assert_eq!(kd_loss(&[1.0f64, 2.0], &[1.0, 2.0], 1).0, 0.0);
        assert_eq!(kd_loss(&[3.0f64, 4.0], &[0.0, 0.0], 1).0, 25.0);
        let (a, _) = kd_loss(&[1.0f64, -2.0, 0.5, 0.0], &[0.0, 0.0, 0.0, 1.0], 2);
        let (b, _) = kd_loss(&[1.0f64, -2.0, 0.5, 0.0, 1.0, -2.0, 0.5, 0.0], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 4);
        assert_eq!(a, b);
    }

    #[test]
    fn combined_reductions() {
        let logits = [2.0f64, -1.0, 0.5, 0.1, 0.3, -0.7];
        let z = [1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0];
        let labels = [0u32, 1];
        let (ce, _) = softmax_cross_entropy(&logits, &labels, 3);
        let (c0, _) = loss_and_grad(&LossSpec::combined(0.0), &logits, &labels, Some(&z), 3).unwrap();
        assert_eq!(c0, ce);
        assert!(matches!(
            loss_and_grad(&LossSpec::combined(0.5), &logits, &labels, None, 3),
            Err(EngineError::MissingTeacher)
        ));
        // With a huge weight the distillation term decides the ordering.
        let other = [0.9f64, 0.1, 0.0, 0.0, 0.9, 0.1];
        let big = LossSpec::combined(1e6);
        let (l1, _) = loss_and_grad(&big, &logits, &labels, Some(&z), 3).unwrap();
        let (l2, _) = loss_and_grad(&big, &other, &labels, Some(&z), 3).unwrap();
        assert_eq!(l1 < l2, kd_loss(&logits, &z, 2).0 < kd_loss(&other, &z, 2).0);
        // Confident, correct logits that also match the teacher.
        let sure = [40.0f64, 0.0, 0.0, 0.0, 40.0, 0.0];
        let (l, _) = loss_and_grad(&LossSpec::combined(0.5), &sure, &labels, Some(&sure), 3).unwrap();
        assert!(l < 1e-15);
    }

    proptest! {
        #[test]
        fn cross_entropy_gradient_closed_form(v in prop::collection::vec(-5.0f64..5.0, 12), y in prop::collection::vec(0u32..4, 3)) {
            let (_, g) = softmax_cross_entropy(&v, &y, 4);
            for (r, row) in v.chunks(4).enumerate() {
                let s: f64 = row.iter().map(|x| x.exp()).sum();
                for j in 0..4 {
                    let want = (row[j].exp() / s - (j as u32 == y[r]) as u8 as f64) / 3.0;
                    prop_assert!((g[r * 4 + j] - want).abs() < 1e-14);
                }
            }
        }

        #[test]
        fn kd_is_nonnegative_and_zero_only_at_match(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6)) {
            let (l, _) = kd_loss(&a, &b, 2);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
        }
    }
}

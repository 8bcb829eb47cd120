//! Scalar reward from compression and accuracy, with degeneracy overrides
//! and linear resource constraints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::DegeneracyClass;

/// Reward assigned to degenerate, diverged or hard-infeasible candidates.
pub const PENALTY: f64 = -1.0;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("teacher parameter count is zero")]
    ZeroTeacher,
    #[error("constraint {row} has {got} coefficients for {expected} variables")]
    Dimension { row: usize, expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    #[default]
    None,
    Hard,
    Annealed,
}

/// One row `coeffs . x <= bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub bound: f64,
}

impl Constraint {
    /// Bound on the student parameter count alone.
    pub fn max_params(bound: f64) -> Self {
        Constraint { coeffs: vec![1.0], bound }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    pub a_teacher: f64,
    pub constraints: Vec<Constraint>,
    pub mode: ConstraintMode,
    pub t_anneal: u32,
}

impl RewardConfig {
    pub fn unconstrained(a_teacher: f64) -> Self {
        RewardConfig { a_teacher, constraints: Vec::new(), mode: ConstraintMode::None, t_anneal: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardRecord {
    pub compression: f64,
    pub accuracy: f64,
    pub reward: f64,
    pub degenerate: DegeneracyClass,
    pub constraint_satisfied: bool,
}

/// `C = 1 - student/teacher`, clamped at 0 for students larger than the teacher.
pub fn compression_ratio(params_student: u64, params_teacher: u64) -> Result<f64, RewardError> {
    if params_teacher == 0 {
        return Err(RewardError::ZeroTeacher);
    }
    Ok((1.0 - params_student as f64 / params_teacher as f64).max(0.0))
}

/// `C(2 - C) * A / A_teacher`.
pub fn base_reward(c: f64, a: f64, a_teacher: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    c * (2.0 - c) * (a / a_teacher)
}

/// Linear relaxation weight: 1 at iteration 0, 0 from `t_anneal` on.
pub fn epsilon(iteration: u32, t_anneal: u32) -> f64 {
    (1.0 - iteration as f64 / t_anneal.max(1) as f64).max(0.0)
}

/// Constrained variables of a candidate. Only the parameter count is built in.
pub fn constraint_variables(params: u64) -> Vec<f64> {
    vec![params as f64]
}

pub fn constraints_satisfied(x: &[f64], constraints: &[Constraint]) -> Result<bool, RewardError> {
    let mut ok = true;
    for (row, c) in constraints.iter().enumerate() {
        if c.coeffs.len() != x.len() {
            return Err(RewardError::Dimension { row, expected: x.len(), got: c.coeffs.len() });
        }
        let lhs: f64 = c.coeffs.iter().zip(x).map(|(a, v)| a * v).sum();
        ok &= lhs <= c.bound;
    }
    Ok(ok)
}

/// Applies the constraint mode to a base reward. Returns the reward and
/// whether the constraints hold.
pub fn constrained_reward(
    base: f64,
    x: &[f64],
    cfg: &RewardConfig,
    iteration: u32,
) -> Result<(f64, bool), RewardError> {
    let ok = constraints_satisfied(x, &cfg.constraints)?;
    let r = match (ok, cfg.mode) {
        (true, _) | (false, ConstraintMode::None) => base,
        (false, ConstraintMode::Hard) => PENALTY,
        (false, ConstraintMode::Annealed) => match epsilon(iteration, cfg.t_anneal) {
            e if e >= 1.0 => base,
            e if e <= 0.0 => PENALTY,
            e => e * (base + 1.0) - 1.0,
        },
    };
    Ok((r, ok))
}

/// `Some(-1)` for degenerate classes; `None` lets the reward pipeline continue.
pub fn degenerate_reward(d: DegeneracyClass) -> Option<f64> {
    if d.is_valid() {
        None
    } else {
        Some(PENALTY)
    }
}

/// The full reward pipeline for one candidate.
pub fn score(
    params: u64,
    params_teacher: u64,
    accuracy: f64,
    degenerate: DegeneracyClass,
    cfg: &RewardConfig,
    iteration: u32,
) -> Result<RewardRecord, RewardError> {
    if let Some(r) = degenerate_reward(degenerate) {
        return Ok(RewardRecord {
            compression: 0.0,
            accuracy: 0.0,
            reward: r,
            degenerate,
            constraint_satisfied: false,
        });
    }
    let c = compression_ratio(params, params_teacher)?;
    let base = base_reward(c, accuracy, cfg.a_teacher);
    let (reward, ok) = constrained_reward(base, &constraint_variables(params), cfg, iteration)?;
    Ok(RewardRecord { compression: c, accuracy, reward, degenerate, constraint_satisfied: ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compression_examples() {
        assert_eq!(compression_ratio(5, 5).unwrap(), 0.0);
        assert_eq!(compression_ratio(6, 5).unwrap(), 0.0);
        assert_eq!(compression_ratio(1, 0), Err(RewardError::ZeroTeacher));
        let c = compression_ratio(2_300_000, 20_200_000).unwrap();
        assert!((c - (1.0 - 23.0 / 202.0)).abs() < 1e-12);
    }

    #[test]
    fn base_reward_examples() {
        assert_eq!(base_reward(0.25, 1.0, 1.0), 0.4375);
        assert_eq!(base_reward(1.0, 0.25, 1.0), 0.25);
        assert_eq!(base_reward(0.0, 0.9, 0.95), 0.0);
        assert_eq!(base_reward(0.0, f64::NAN, 0.95), 0.0);
    }

    #[test]
    fn epsilon_schedule() {
        assert_eq!(epsilon(0, 10), 1.0);
        assert_eq!(epsilon(5, 10), 0.5);
        assert_eq!(epsilon(10, 10), 0.0);
        assert_eq!(epsilon(25, 10), 0.0);
        let e: Vec<f64> = (0..30).map(|t| epsilon(t, 12)).collect();
        assert!(e.windows(2).all(|w| w[1] <= w[0]));
    }

    fn cfg(mode: ConstraintMode) -> RewardConfig {
        RewardConfig { a_teacher: 0.9, constraints: vec![Constraint::max_params(100.0)], mode, t_anneal: 10 }
    }

    #[test]
    fn constraint_modes() {
        let x = [150.0];
        assert_eq!(constrained_reward(0.3, &x, &cfg(ConstraintMode::Hard), 0).unwrap(), (-1.0, false));
        assert_eq!(constrained_reward(0.3, &x, &cfg(ConstraintMode::Annealed), 0).unwrap(), (0.3, false));
        assert_eq!(constrained_reward(0.3, &x, &cfg(ConstraintMode::Annealed), 10).unwrap(), (-1.0, false));
        assert_eq!(constrained_reward(0.3, &x, &cfg(ConstraintMode::None), 10).unwrap(), (0.3, false));
        for mode in [ConstraintMode::Hard, ConstraintMode::Annealed, ConstraintMode::None] {
            assert_eq!(constrained_reward(0.3, &[100.0], &cfg(mode), 3).unwrap(), (0.3, true));
        }
        let bad = constrained_reward(0.3, &[1.0, 2.0], &cfg(ConstraintMode::Hard), 0);
        assert_eq!(bad, Err(RewardError::Dimension { row: 0, expected: 2, got: 1 }));
    }

    #[test]
    fn degenerate_overrides() {
        use DegeneracyClass::*;
        for d in [EmptyArchitecture, LargeFC, BlockMismatch, ShapeFailure] {
            assert_eq!(degenerate_reward(d), Some(-1.0));
            let r = score(10, 100, 0.9, d, &cfg(ConstraintMode::None), 0).unwrap();
            assert_eq!(r.reward, -1.0);
        }
        assert_eq!(degenerate_reward(Valid), None);
    }

    #[test]
    fn grid_monotonicity_and_asymmetry() {
        let n = 100;
        let grid: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        for &c in &grid[1..] {
            for w in grid.windows(2) {
                assert!(base_reward(c, w[1], 1.0) > base_reward(c, w[0], 1.0));
            }
        }
        for &a in &grid[1..] {
            for w in grid.windows(2) {
                assert!(base_reward(w[1], a, 1.0) > base_reward(w[0], a, 1.0));
            }
        }
        for &a in &grid[1..] {
            for &c in &grid[1..] {
                if a > c {
                    assert!(base_reward(c, a, 1.0) > base_reward(a, c, 1.0));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn annealed_is_continuous_and_meets_hard(base in -1.0f64..2.0, t in 0u32..40) {
            let (ann, _) = constrained_reward(base, &[500.0], &cfg(ConstraintMode::Annealed), t).unwrap();
            let eps = epsilon(t, 10);
            prop_assert!((ann - (eps * (base + 1.0) - 1.0)).abs() < 1e-12);
            if eps == 0.0 {
                let (hard, _) = constrained_reward(base, &[500.0], &cfg(ConstraintMode::Hard), t).unwrap();
                prop_assert_eq!(ann, hard);
            }
        }

        #[test]
        fn score_is_bounded(p in 1u64..2000, acc in 0.0f64..1.0) {
            let r = score(p, 1000, acc, DegeneracyClass::Valid, &cfg(ConstraintMode::None), 0).unwrap();
            prop_assert!(r.reward >= 0.0 && r.reward < 2.0 / 0.9);
            prop_assert!((0.0..1.0).contains(&r.compression));
        }
    }
}

use super::{AccuracyOracle, Assessment};
use crate::arch::Architecture;
use crate::seed::text_digest;

/// Analytic accuracy proxy for exercising the search machinery without
/// training anything:
///
/// `a_teacher * (1 - alpha * depth_deficit - beta * width_deficit)`, clamped to `[0, 1]`.
///
/// `depth_deficit` is the fraction of weighted layers missing relative to
/// the teacher. `width_deficit` is the fraction of parameters missing
/// relative to `reference` and only applies to candidates with the same
/// layer-type sequence as `reference`, i.e. to pure shrinkages of it.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub teacher: Architecture,
    pub reference: Architecture,
    pub a_teacher: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_BETA: f64 = 0.4;

impl SurrogateModel {
    pub fn new(teacher: Architecture, a_teacher: f64) -> Self {
        SurrogateModel { reference: teacher.clone(), teacher, a_teacher, alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA }
    }

    pub fn with_reference(mut self, reference: Architecture) -> Self {
        self.reference = reference;
        self
    }

    pub fn depth_deficit(&self, arch: &Architecture) -> f64 {
        let t = self.teacher.weighted_layer_count();
        if t == 0 {
            return 0.0;
        }
        (1.0 - arch.weighted_layer_count() as f64 / t as f64).max(0.0)
    }

    pub fn width_deficit(&self, arch: &Architecture) -> f64 {
        if arch.type_signature() != self.reference.type_signature() {
            return 0.0;
        }
        match (arch.param_count(), self.reference.param_count()) {
            (Ok(p), Ok(r)) if r > 0 => (1.0 - p as f64 / r as f64).clamp(0.0, 1.0),
            _ => 0.0,
        }
    }

    pub fn accuracy_fn(&self, arch: &Architecture) -> f64 {
        let a = 1.0 - self.alpha * self.depth_deficit(arch) - self.beta * self.width_deficit(arch);
        (self.a_teacher * a).clamp(0.0, 1.0)
    }
}

impl AccuracyOracle for SurrogateModel {
    fn assess(&self, arch: &Architecture) -> Assessment {
        Assessment { accuracy: self.accuracy_fn(arch), diverged: false, trained: false, wall_seconds: 0.0 }
    }

    fn scope(&self) -> u64 {
        let tag = format!("surrogate {} {} {}\n{}", self.a_teacher, self.alpha, self.beta, self.reference);
        text_digest(&tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{presets, RemovalMask, ShrinkVector};

    #[test]
    fn teacher_is_a_fixed_point() {
        for t in presets::all() {
            let m = SurrogateModel::new(t.clone(), 0.93);
            assert_eq!(m.accuracy_fn(&t), 0.93);
        }
    }

    #[test]
    fn removal_never_raises_accuracy() {
        let t = presets::surrogate_teacher_a();
        let m = SurrogateModel::new(t.clone(), 0.95);
        let n = t.len();
        for bits in 0..1u32 << n {
            let keep: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
            let a = t.apply_removal(&RemovalMask { keep: keep.clone() }).unwrap();
            for j in (0..n).filter(|&j| keep[j]) {
                let mut fewer = keep.clone();
                fewer[j] = false;
                let b = t.apply_removal(&RemovalMask { keep: fewer }).unwrap();
                assert!(m.accuracy_fn(&b) <= m.accuracy_fn(&a));
            }
        }
    }

    #[test]
    fn shrinking_costs_width_accuracy() {
        let t = presets::surrogate_teacher_a();
        let m = SurrogateModel::new(t.clone(), 1.0);
        let n = t.config_variables().len();
        let half = t.apply_shrinkage(&ShrinkVector { levels: vec![5; n] }).unwrap();
        let w = m.width_deficit(&half);
        assert!(w > 0.5 && w < 1.0);
        assert!((m.accuracy_fn(&half) - (1.0 - 0.4 * w)).abs() < 1e-12);
        assert_eq!(m.depth_deficit(&half), 0.0);
        // A different reference changes the cache scope.
        assert_ne!(m.scope(), m.clone().with_reference(half).scope());
    }
}

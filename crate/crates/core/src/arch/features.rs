use super::{ArchError, Architecture, LayerSpec, LayerType};

/// Per-layer feature width: six one-hot type slots plus six numeric fields.
pub const FEATURE_DIM: usize = LayerType::ALL.len() + 6;

/// Per-field maxima taken over the teacher, so features stay comparable along
/// a trajectory and across stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureNorm {
    max: [f64; 6],
}

fn numeric(l: &LayerSpec) -> [f64; 6] {
    [
        l.kernel as f64,
        l.stride as f64,
        l.padding as f64,
        l.n_out as f64,
        l.skip_start as f64,
        l.skip_end as f64,
    ]
}

impl FeatureNorm {
    pub fn from_teacher(teacher: &Architecture) -> Self {
        let mut max = [0.0f64; 6];
        for l in &teacher.layers {
            for (m, v) in max.iter_mut().zip(numeric(l)) {
                *m = m.max(v);
            }
        }
        FeatureNorm { max }
    }

    fn encode(&self, l: &LayerSpec) -> Vec<f64> {
        let mut f = vec![0.0; FEATURE_DIM];
        f[l.layer_type.code()] = 1.0;
        for (j, (v, m)) in numeric(l).iter().zip(&self.max).enumerate() {
            f[LayerType::ALL.len() + j] = if *m > 0.0 { v / m } else { 0.0 };
        }
        f
    }
}

/// One feature vector per layer: one-hot layer type followed by kernel,
/// stride, padding, output count and the two skip fields, each divided by
/// the teacher maximum.
pub fn encode_layer_features(arch: &Architecture, norm: &FeatureNorm) -> Result<Vec<Vec<f64>>, ArchError> {
    arch.infer_shapes()?;
    Ok(arch.layers.iter().map(|l| norm.encode(l)).collect())
}

/// One feature vector per configuration variable (see
/// [`Architecture::config_variables`]): the owning layer's features.
pub fn shrink_features(arch: &Architecture, norm: &FeatureNorm) -> Result<Vec<Vec<f64>>, ArchError> {
    arch.infer_shapes()?;
    Ok(arch
        .config_variables()
        .into_iter()
        .map(|(i, _)| norm.encode(&arch.layers[i]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::presets;

    #[test]
    fn widest_layer_has_unit_width_feature() {
        let t = presets::mnist_conv_teacher();
        let norm = FeatureNorm::from_teacher(&t);
        let f = encode_layer_features(&t, &norm).unwrap();
        let widest = t.layers.iter().enumerate().max_by_key(|(_, l)| l.n_out).unwrap().0;
        assert_eq!(f[widest][LayerType::ALL.len() + 3], 1.0);
        assert!(f.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn non_block_layers_have_zero_skip_features() {
        let t = presets::residual_teacher();
        let norm = FeatureNorm::from_teacher(&t);
        let f = encode_layer_features(&t, &norm).unwrap();
        assert_eq!(&f[0][FEATURE_DIM - 2..], &[0.0, 0.0]);
        assert!(f[2][FEATURE_DIM - 2] > 0.0 && f[2][FEATURE_DIM - 1] > 0.0);
    }

    #[test]
    fn identical_layers_identical_features() {
        let t = presets::mnist_conv_teacher();
        let norm = FeatureNorm::from_teacher(&t);
        let f = encode_layer_features(&t, &norm).unwrap();
        // layers 1 and 4 are both plain ReLUs
        assert_eq!(f[1], f[4]);
    }

    #[test]
    fn shrink_features_follow_variables() {
        let t = presets::mnist_conv_teacher();
        let norm = FeatureNorm::from_teacher(&t);
        let f = shrink_features(&t, &norm).unwrap();
        assert_eq!(f.len(), t.config_variables().len());
        assert_eq!(f[0], f[1]);
    }
}

//! Network architectures as plain data.
//!
//! An [`Architecture`] is an ordered list of [`LayerSpec`] records plus the
//! input shape, class count and residual block spans. It is the state the two
//! compression policies act on: [`Architecture::apply_removal`] implements the
//! keep/remove transition and [`Architecture::apply_shrinkage`] the per-variable
//! attenuation. Both transitions are pure and deterministic.

mod features;
mod format;
pub mod presets;

pub use features::{encode_layer_features, shrink_features, FeatureNorm, FEATURE_DIM};
pub use format::FormatError;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default limit on the flattened feature size entering the first linear layer.
pub const DEFAULT_MAX_FLATTEN: usize = 16384;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArchError {
    #[error("architecture has no layers")]
    NoLayers,
    #[error("shape inference failed at layer {layer}: {reason}")]
    ShapeFailure { layer: usize, reason: String },
    #[error("removal mask has {got} entries, architecture has {expected} layers")]
    MaskLength { expected: usize, got: usize },
    #[error("shrink vector has {got} entries, architecture has {expected} configuration variables")]
    ShrinkLength { expected: usize, got: usize },
    #[error("shrink level {0} outside 1..=10")]
    ShrinkLevel(u8),
    #[error("invalid block span {start}..={end} for {len} layers")]
    BadBlock { start: usize, end: usize, len: usize },
    #[error("invalid layer {index}: {reason}")]
    BadLayer { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerType {
    Conv2d,
    Linear,
    MaxPool,
    Activation,
    BatchNorm,
    Flatten,
}

impl LayerType {
    pub const ALL: [LayerType; 6] = [
        LayerType::Conv2d,
        LayerType::Linear,
        LayerType::MaxPool,
        LayerType::Activation,
        LayerType::BatchNorm,
        LayerType::Flatten,
    ];

    /// Position in [`LayerType::ALL`]; used for one-hot encoding.
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerType::Conv2d => "conv2d",
            LayerType::Linear => "linear",
            LayerType::MaxPool => "maxpool",
            LayerType::Activation => "relu",
            LayerType::BatchNorm => "batchnorm",
            LayerType::Flatten => "flatten",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        LayerType::ALL.iter().copied().find(|t| t.name() == s)
    }

    /// Layers that own a weight matrix. Only these count towards "non-empty".
    pub fn is_weighted(self) -> bool {
        matches!(self, LayerType::Conv2d | LayerType::Linear)
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, LayerType::Conv2d | LayerType::MaxPool)
    }
}

impl fmt::Display for LayerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One layer record: type, kernel, stride, padding, output count and the two
/// skip-connection position fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub layer_type: LayerType,
    pub kernel: u32,
    pub stride: u32,
    pub padding: u32,
    pub n_out: u32,
    /// 1-based position inside the enclosing residual block, 0 outside blocks.
    pub skip_start: u32,
    /// Layers remaining until the block ends, counting this one; 0 outside blocks.
    pub skip_end: u32,
}

impl LayerSpec {
    fn plain(layer_type: LayerType, kernel: u32, stride: u32, padding: u32, n_out: u32) -> Self {
        LayerSpec { layer_type, kernel, stride, padding, n_out, skip_start: 0, skip_end: 0 }
    }

    pub fn conv(n_out: u32, kernel: u32, stride: u32, padding: u32) -> Self {
        Self::plain(LayerType::Conv2d, kernel, stride, padding, n_out)
    }

    pub fn linear(n_out: u32) -> Self {
        Self::plain(LayerType::Linear, 0, 1, 0, n_out)
    }

    pub fn max_pool(kernel: u32, stride: u32) -> Self {
        Self::plain(LayerType::MaxPool, kernel, stride, 0, 0)
    }

    pub fn relu() -> Self {
        Self::plain(LayerType::Activation, 0, 1, 0, 0)
    }

    pub fn batch_norm() -> Self {
        Self::plain(LayerType::BatchNorm, 0, 1, 0, 0)
    }

    pub fn flatten() -> Self {
        Self::plain(LayerType::Flatten, 0, 1, 0, 0)
    }

    fn check(&self, index: usize) -> Result<(), ArchError> {
        let bad = |reason: &str| Err(ArchError::BadLayer { index, reason: reason.to_string() });
        if self.layer_type.is_spatial() && (self.kernel < 1 || self.stride < 1) {
            return bad("kernel and stride must be >= 1");
        }
        if self.layer_type.is_weighted() && self.n_out < 1 {
            return bad("n_out must be >= 1");
        }
        if (self.skip_start == 0) != (self.skip_end == 0) {
            return bad("skip_start and skip_end must both be zero or both non-zero");
        }
        Ok(())
    }
}

/// Channel-height-width shape of a feature map. Linear outputs are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.c, self.h, self.w)
    }
}

/// Inclusive span of layer indices wrapped by an identity skip connection:
/// the input of layer `start` is added to the output of layer `end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Block {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Shape,
    pub n_classes: u32,
    pub blocks: Vec<Block>,
}

/// Removal action sequence: `keep[i]` decides layer `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RemovalMask {
    pub keep: Vec<bool>,
}

impl RemovalMask {
    pub fn all_keep(n: usize) -> Self {
        RemovalMask { keep: vec![true; n] }
    }

    pub fn all_remove(n: usize) -> Self {
        RemovalMask { keep: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// Number of discrete shrink levels; level `j` means factor `j / 10`.
pub const SHRINK_LEVELS: usize = 10;

/// Shrink action sequence. Levels are integers in `1..=10` so the factor
/// `level / 10` is represented exactly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ShrinkVector {
    pub levels: Vec<u8>,
}

impl ShrinkVector {
    pub fn identity(n: usize) -> Self {
        ShrinkVector { levels: vec![SHRINK_LEVELS as u8; n] }
    }

    pub fn factor(&self, i: usize) -> f64 {
        self.levels[i] as f64 / SHRINK_LEVELS as f64
    }

    pub fn factors(&self) -> Vec<f64> {
        (0..self.levels.len()).map(|i| self.factor(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Which field of a layer a shrink action targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConfigVar {
    Kernel,
    Padding,
    Width,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DegeneracyClass {
    Valid,
    EmptyArchitecture,
    LargeFC,
    BlockMismatch,
    ShapeFailure,
}

impl DegeneracyClass {
    pub fn is_valid(self) -> bool {
        self == DegeneracyClass::Valid
    }

    pub fn label(self) -> &'static str {
        match self {
            DegeneracyClass::Valid => "Valid",
            DegeneracyClass::EmptyArchitecture => "EmptyArchitecture",
            DegeneracyClass::LargeFC => "LargeFC",
            DegeneracyClass::BlockMismatch => "BlockMismatch",
            DegeneracyClass::ShapeFailure => "ShapeFailure",
        }
    }
}

impl fmt::Display for DegeneracyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegeneracyLimits {
    pub max_flatten: usize,
}

impl Default for DegeneracyLimits {
    fn default() -> Self {
        DegeneracyLimits { max_flatten: DEFAULT_MAX_FLATTEN }
    }
}

/// `floor((size - kernel + 2 * padding) / stride) + 1`, or `None` when the
/// window does not fit.
fn window_out(size: usize, kernel: u32, stride: u32, padding: u32) -> Option<usize> {
    let padded = size + 2 * padding as usize;
    let k = kernel as usize;
    if stride == 0 || k == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride as usize + 1)
}

impl Architecture {
    /// Builds an architecture and fills in the skip-position fields of every
    /// layer from `blocks`.
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: Shape,
        n_classes: u32,
        blocks: Vec<Block>,
    ) -> Result<Self, ArchError> {
        let mut arch = Architecture { layers, input_shape, n_classes, blocks };
        arch.check_blocks()?;
        arch.annotate_skips();
        for (i, l) in arch.layers.iter().enumerate() {
            l.check(i)?;
        }
        Ok(arch)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn check_blocks(&self) -> Result<(), ArchError> {
        let len = self.layers.len();
        let mut prev_end: Option<usize> = None;
        for b in &self.blocks {
            let bad = ArchError::BadBlock { start: b.start, end: b.end, len };
            if b.start > b.end || b.end >= len {
                return Err(bad);
            }
            if let Some(pe) = prev_end {
                if b.start <= pe {
                    return Err(bad);
                }
            }
            prev_end = Some(b.end);
        }
        Ok(())
    }

    fn annotate_skips(&mut self) {
        for l in &mut self.layers {
            l.skip_start = 0;
            l.skip_end = 0;
        }
        for b in &self.blocks {
            for i in b.start..=b.end {
                self.layers[i].skip_start = (i - b.start + 1) as u32;
                self.layers[i].skip_end = (b.end - i + 1) as u32;
            }
        }
    }

    /// Output shape after every layer.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>, ArchError> {
        if self.layers.is_empty() {
            return Err(ArchError::NoLayers);
        }
        let mut cur = self.input_shape;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let fail = |reason: String| ArchError::ShapeFailure { layer: i, reason };
            cur = match l.layer_type {
                LayerType::Conv2d | LayerType::MaxPool => {
                    let h = window_out(cur.h, l.kernel, l.stride, l.padding);
                    let w = window_out(cur.w, l.kernel, l.stride, l.padding);
                    match (h, w) {
                        (Some(h), Some(w)) if h >= 1 && w >= 1 => {
                            let c = if l.layer_type == LayerType::Conv2d { l.n_out as usize } else { cur.c };
                            Shape::new(c, h, w)
                        }
                        _ => {
                            return Err(fail(format!(
                                "kernel {} (padding {}) does not fit input {}",
                                l.kernel, l.padding, cur
                            )))
                        }
                    }
                }
                LayerType::Linear => Shape::new(l.n_out as usize, 1, 1),
                LayerType::Flatten => Shape::new(cur.numel(), 1, 1),
                LayerType::Activation | LayerType::BatchNorm => cur,
            };
            if cur.c < 1 || cur.h < 1 || cur.w < 1 {
                return Err(fail(format!("non-positive output shape {cur}")));
            }
            out.push(cur);
        }
        Ok(out)
    }

    /// Input shape of every layer (the input shape followed by all but the last output).
    pub fn input_shapes(&self) -> Result<Vec<Shape>, ArchError> {
        let outs = self.infer_shapes()?;
        let mut ins = Vec::with_capacity(outs.len());
        ins.push(self.input_shape);
        ins.extend_from_slice(&outs[..outs.len() - 1]);
        Ok(ins)
    }

    /// Trainable parameters contributed by each layer.
    pub fn layer_param_counts(&self) -> Result<Vec<u64>, ArchError> {
        let ins = self.input_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&ins)
            .map(|(l, s)| layer_params(l, s))
            .collect())
    }

    pub fn param_count(&self) -> Result<u64, ArchError> {
        Ok(self.layer_param_counts()?.iter().sum())
    }

    /// Keeps exactly the layers whose mask entry is `true`, in order. Blocks are
    /// re-indexed onto their surviving layers; fully removed blocks disappear.
    pub fn apply_removal(&self, mask: &RemovalMask) -> Result<Architecture, ArchError> {
        if mask.len() != self.layers.len() {
            return Err(ArchError::MaskLength { expected: self.layers.len(), got: mask.len() });
        }
        let mut new_index = vec![None; self.layers.len()];
        let mut layers = Vec::new();
        for (i, (l, &keep)) in self.layers.iter().zip(&mask.keep).enumerate() {
            if keep {
                new_index[i] = Some(layers.len());
                layers.push(*l);
            }
        }
        let blocks = self
            .blocks
            .iter()
            .filter_map(|b| {
                let kept: Vec<usize> = (b.start..=b.end).filter_map(|i| new_index[i]).collect();
                Some(Block { start: *kept.first()?, end: *kept.last()? })
            })
            .collect();
        let mut arch = Architecture {
            layers,
            input_shape: self.input_shape,
            n_classes: self.n_classes,
            blocks,
        };
        arch.annotate_skips();
        Ok(arch)
    }

    /// The configuration variables a shrink trajectory visits, in order:
    /// kernel, padding and width for each convolution, width for each linear
    /// layer. The final layer's width is the class count and is never listed.
    pub fn config_variables(&self) -> Vec<(usize, ConfigVar)> {
        let last = self.layers.len().saturating_sub(1);
        let mut vars = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l.layer_type {
                LayerType::Conv2d => {
                    vars.push((i, ConfigVar::Kernel));
                    vars.push((i, ConfigVar::Padding));
                    if i != last {
                        vars.push((i, ConfigVar::Width));
                    }
                }
                LayerType::Linear if i != last => vars.push((i, ConfigVar::Width)),
                _ => {}
            }
        }
        vars
    }

    /// Scales each configuration variable by its shrink factor.
    ///
    /// Kernel and width become `max(1, round(a * v))`, padding becomes
    /// `round(a * p)`; rounding is half away from zero.
    pub fn apply_shrinkage(&self, actions: &ShrinkVector) -> Result<Architecture, ArchError> {
        let vars = self.config_variables();
        if vars.len() != actions.len() {
            return Err(ArchError::ShrinkLength { expected: vars.len(), got: actions.len() });
        }
        let mut out = self.clone();
        for (&(idx, var), &level) in vars.iter().zip(&actions.levels) {
            if level == 0 || level as usize > SHRINK_LEVELS {
                return Err(ArchError::ShrinkLevel(level));
            }
            let l = &mut out.layers[idx];
            match var {
                ConfigVar::Kernel => l.kernel = scale_level(l.kernel, level).max(1),
                ConfigVar::Padding => l.padding = scale_level(l.padding, level),
                ConfigVar::Width => l.n_out = scale_level(l.n_out, level).max(1),
            }
        }
        Ok(out)
    }

    /// Flattened feature count entering the first linear layer, if any.
    pub fn first_linear_fan_in(&self) -> Result<Option<usize>, ArchError> {
        let ins = self.input_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&ins)
            .find(|(l, _)| l.layer_type == LayerType::Linear)
            .map(|(_, s)| s.numel()))
    }

    pub fn classify_degenerate(&self, limits: &DegeneracyLimits) -> DegeneracyClass {
        if !self.layers.iter().any(|l| l.layer_type.is_weighted()) {
            return DegeneracyClass::EmptyArchitecture;
        }
        if self.check_blocks().is_err() || self.layers.iter().enumerate().any(|(i, l)| l.check(i).is_err()) {
            return DegeneracyClass::ShapeFailure;
        }
        let outs = match self.infer_shapes() {
            Ok(s) => s,
            Err(_) => return DegeneracyClass::ShapeFailure,
        };
        let last = *outs.last().expect("non-empty");
        if last != Shape::new(self.n_classes as usize, 1, 1) {
            return DegeneracyClass::ShapeFailure;
        }
        for b in &self.blocks {
            let entering = if b.start == 0 { self.input_shape } else { outs[b.start - 1] };
            if entering != outs[b.end] {
                return DegeneracyClass::BlockMismatch;
            }
        }
        match self.first_linear_fan_in() {
            Ok(Some(n)) if n > limits.max_flatten => DegeneracyClass::LargeFC,
            _ => DegeneracyClass::Valid,
        }
    }

    /// Number of weighted (convolution or linear) layers.
    pub fn weighted_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.layer_type.is_weighted()).count()
    }

    pub fn type_signature(&self) -> Vec<LayerType> {
        self.layers.iter().map(|l| l.layer_type).collect()
    }
}

/// `round(level / 10 * v)` in exact integer arithmetic, ties away from zero.
fn scale_level(v: u32, level: u8) -> u32 {
    let num = v as u64 * level as u64;
    ((num * 2 + SHRINK_LEVELS as u64) / (2 * SHRINK_LEVELS as u64)) as u32
}

fn layer_params(l: &LayerSpec, input: &Shape) -> u64 {
    match l.layer_type {
        LayerType::Conv2d => {
            let k = l.kernel as u64;
            input.c as u64 * l.n_out as u64 * k * k + l.n_out as u64
        }
        LayerType::Linear => input.numel() as u64 * l.n_out as u64 + l.n_out as u64,
        LayerType::BatchNorm => 2 * input.c as u64,
        _ => 0,
    }
}

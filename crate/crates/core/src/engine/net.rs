use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, ConvGeom};
use super::scalar::Scalar;
use super::EngineError;
use crate::arch::{Architecture, DegeneracyClass, DegeneracyLimits, LayerType, Shape};

/// BatchNorm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Parameters of one layer. Parameterless layers leave every buffer empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T> LayerParams<T> {
    fn empty() -> Self {
        LayerParams { weight: Vec::new(), bias: Vec::new(), running_mean: Vec::new(), running_var: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Conv(ConvGeom),
    Linear { in_f: usize, out_f: usize },
    Pool(ConvGeom),
    Relu,
    BatchNorm { c: usize, hw: usize },
    Flatten,
}

#[derive(Debug, Clone)]
pub struct TrainableNet<T> {
    pub arch: Architecture,
    pub layers: Vec<LayerParams<T>>,
    pub rng_seed: u64,
    ops: Vec<Op>,
    /// `skip_from[i] = Some(s)` when the output of layer `i` receives the
    /// activation entering layer `s`.
    skip_from: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Cols(Vec<T>),
    Arg(Vec<u32>),
    Bn { xhat: Vec<T>, inv: Vec<T>, mean: Vec<T>, var: Vec<T> },
}

/// Everything a training-mode forward pass records for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub n: usize,
    /// `acts[0]` is the input; `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<T>>,
    caches: Vec<Cache<T>>,
}

impl<T> Tape<T> {
    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("non-empty tape")
    }
}

/// Gradients aligned with `TrainableNet::tensors`.
pub type Grads<T> = Vec<Vec<T>>;

fn geom(input: Shape, output: Shape, k: u32, s: u32, p: u32) -> ConvGeom {
    ConvGeom {
        in_c: input.c,
        in_h: input.h,
        in_w: input.w,
        out_c: output.c,
        k: k as usize,
        s: s as usize,
        p: p as usize,
        out_h: output.h,
        out_w: output.w,
    }
}

/// Allocates a network for `arch` with He-uniform weights drawn from `seed`.
pub fn build_network<T: Scalar>(arch: &Architecture, seed: u64) -> Result<TrainableNet<T>, EngineError> {
    let class = arch.classify_degenerate(&DegeneracyLimits { max_flatten: usize::MAX });
    if class != DegeneracyClass::Valid {
        return Err(EngineError::NotValid(class));
    }
    let ins = arch.input_shapes()?;
    let outs = arch.infer_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::with_capacity(arch.len());
    let mut layers = Vec::with_capacity(arch.len());
    for ((l, &i), &o) in arch.layers.iter().zip(&ins).zip(&outs) {
        let mut p = LayerParams::empty();
        let mut he = |fan_in: usize, count: usize| -> Vec<T> {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..count).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
        };
        let op = match l.layer_type {
            LayerType::Conv2d => {
                let g = geom(i, o, l.kernel, l.stride, l.padding);
                p.weight = he(g.col_rows(), g.out_c * g.col_rows());
                p.bias = vec![T::zero(); g.out_c];
                Op::Conv(g)
            }
            LayerType::Linear => {
                let (in_f, out_f) = (i.numel(), l.n_out as usize);
                p.weight = he(in_f, in_f * out_f);
                p.bias = vec![T::zero(); out_f];
                Op::Linear { in_f, out_f }
            }
            LayerType::MaxPool => Op::Pool(geom(i, o, l.kernel, l.stride, l.padding)),
            LayerType::Activation => Op::Relu,
            LayerType::BatchNorm => {
                p.weight = vec![T::one(); i.c];
                p.bias = vec![T::zero(); i.c];
                p.running_mean = vec![T::zero(); i.c];
                p.running_var = vec![T::one(); i.c];
                Op::BatchNorm { c: i.c, hw: i.h * i.w }
            }
            LayerType::Flatten => Op::Flatten,
        };
        ops.push(op);
        layers.push(p);
    }
    let mut skip_from = vec![None; arch.len()];
    for b in &arch.blocks {
        skip_from[b.end] = Some(b.start);
    }
    Ok(TrainableNet { arch: arch.clone(), layers, rng_seed: seed, ops, skip_from })
}

impl<T: Scalar> TrainableNet<T> {
    pub fn n_classes(&self) -> usize {
        self.arch.n_classes as usize
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_shape.numel()
    }

    /// Trainable tensors in a fixed order: weight then bias for every
    /// convolution, linear and batch-norm layer.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .filter(|p| !p.weight.is_empty())
            .flat_map(|p| [p.weight.as_slice(), p.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers
            .iter_mut()
            .filter(|p| !p.weight.is_empty())
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Shape of layer `i`'s weight tensor, e.g. `[out, in, k, k]` for a convolution.
    pub fn weight_shape(&self, i: usize) -> Vec<usize> {
        match self.ops[i] {
            Op::Conv(g) => vec![g.out_c, g.in_c, g.k, g.k],
            Op::Linear { in_f, out_f } => vec![out_f, in_f],
            Op::BatchNorm { c, .. } => vec![c],
            _ => vec![],
        }
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> TrainableNet<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect();
        TrainableNet {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    weight: conv(&p.weight),
                    bias: conv(&p.bias),
                    running_mean: conv(&p.running_mean),
                    running_var: conv(&p.running_var),
                })
                .collect(),
            rng_seed: self.rng_seed,
            ops: self.ops.clone(),
            skip_from: self.skip_from.clone(),
        }
    }

    fn check_input(&self, x: &[T], n: usize) -> Result<(), EngineError> {
        let want = n * self.input_len();
        if x.len() != want {
            return Err(EngineError::InputShape { expected: want, got: x.len() });
        }
        Ok(())
    }

    fn run(&self, x: &[T], n: usize, train: bool) -> Result<Tape<T>, EngineError> {
        self.check_input(x, n)?;
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        let mut caches = Vec::with_capacity(self.ops.len());
        acts.push(x.to_vec());
        for (i, (op, p)) in self.ops.iter().zip(&self.layers).enumerate() {
            let input = &acts[i];
            let (mut y, cache) = match *op {
                Op::Conv(g) => {
                    let (y, cols) = layers::conv_forward(input, n, &g, &p.weight, &p.bias);
                    (y, if train { Cache::Cols(cols) } else { Cache::None })
                }
                Op::Linear { in_f, out_f } => {
                    (layers::linear_forward(input, n, in_f, out_f, &p.weight, &p.bias), Cache::None)
                }
                Op::Pool(g) => {
                    let (y, arg) = layers::pool_forward(input, n, &g);
                    (y, if train { Cache::Arg(arg) } else { Cache::None })
                }
                Op::Relu => (layers::relu_forward(input), Cache::None),
                Op::BatchNorm { c, hw } => {
                    if train {
                        let (mean, var) = layers::channel_stats(input, n, c, hw);
                        let (y, xhat, inv) = layers::bn_apply(input, n, c, hw, &p.weight, &p.bias, &mean, &var);
                        (y, Cache::Bn { xhat, inv, mean, var })
                    } else {
                        let (y, _, _) =
                            layers::bn_apply(input, n, c, hw, &p.weight, &p.bias, &p.running_mean, &p.running_var);
                        (y, Cache::None)
                    }
                }
                Op::Flatten => (input.clone(), Cache::None),
            };
            if let Some(s) = self.skip_from[i] {
                for (a, &b) in y.iter_mut().zip(&acts[s]) {
                    *a += b;
                }
            }
            acts.push(y);
            caches.push(cache);
        }
        Ok(Tape { n, acts, caches })
    }

    /// Inference-mode logits, `n x n_classes`.
    pub fn forward(&self, x: &[T], n: usize) -> Result<Vec<T>, EngineError> {
        Ok(self.run(x, n, false)?.acts.pop().expect("output"))
    }

    /// Training-mode pass using batch statistics. Does not touch running
    /// statistics; see `commit_batch_stats`.
    pub fn forward_train(&self, x: &[T], n: usize) -> Result<Tape<T>, EngineError> {
        self.run(x, n, true)
    }

    /// Folds the batch statistics recorded in `tape` into the running estimates.
    pub fn commit_batch_stats(&mut self, tape: &Tape<T>) {
        let mom = T::of(BN_MOMENTUM);
        for ((p, cache), op) in self.layers.iter_mut().zip(&tape.caches).zip(&self.ops) {
            if let (Cache::Bn { mean, var, .. }, Op::BatchNorm { hw, .. }) = (cache, op) {
                let m = (tape.n * hw) as f64;
                let unbias = T::of(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
                for ch in 0..mean.len() {
                    p.running_mean[ch] = (T::one() - mom) * p.running_mean[ch] + mom * mean[ch];
                    p.running_var[ch] = (T::one() - mom) * p.running_var[ch] + mom * var[ch] * unbias;
                }
            }
        }
    }

    /// Parameter gradients of a loss whose gradient w.r.t. the logits is `dlogits`.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &[T]) -> Grads<T> {
        let n = tape.n;
        let l = self.ops.len();
        let mut grads: Vec<(Vec<T>, Vec<T>)> =
            self.layers.iter().map(|p| (vec![T::zero(); p.weight.len()], vec![T::zero(); p.bias.len()])).collect();
        let mut pending: Vec<Option<Vec<T>>> = vec![None; l + 1];
        let mut g = dlogits.to_vec();
        for i in (0..l).rev() {
            if let Some(p) = pending[i + 1].take() {
                for (a, b) in g.iter_mut().zip(p) {
                    *a += b;
                }
            }
            if let Some(s) = self.skip_from[i] {
                match &mut pending[s] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g.clone()),
                }
            }
            let need_dx = i > 0;
            let p = &self.layers[i];
            let (dw, db) = &mut grads[i];
            g = match (self.ops[i], &tape.caches[i]) {
                (Op::Conv(geo), Cache::Cols(cols)) => layers::conv_backward(&g, n, &geo, &p.weight, cols, dw, db, need_dx),
                (Op::Linear { in_f, out_f }, _) => {
                    layers::linear_backward(&g, &tape.acts[i], n, in_f, out_f, &p.weight, dw, db, need_dx)
                }
                (Op::Pool(geo), Cache::Arg(arg)) => layers::pool_backward(&g, arg, n * geo.in_len()),
                (Op::Relu, _) => layers::relu_backward(&g, &tape.acts[i + 1]),
                (Op::BatchNorm { c, hw }, Cache::Bn { xhat, inv, .. }) => {
                    layers::bn_backward(&g, xhat, inv, &p.weight, n, c, hw, dw, db)
                }
                (Op::Flatten, _) => g,
                _ => unreachable!("tape recorded in training mode"),
            };
        }
        grads
            .into_iter()
            .zip(&self.layers)
            .filter(|(_, p)| !p.weight.is_empty())
            .flat_map(|((w, b), _)| [w, b])
            .collect()
    }
}

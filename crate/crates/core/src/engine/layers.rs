//! Batched forward and backward kernels. Activations are batch-major
//! `[n][c][h][w]` buffers.

use super::scalar::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output position `o` and kernel offset `kk`,
    /// or `None` when it falls in the padding.
    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        (o * self.s + kk).checked_sub(self.p).filter(|&i| i < limit)
    }
}

/// Columns laid out `[c*k*k][n][out_h*out_w]` so one gemm covers the batch.
pub(crate) fn im2col<T: Scalar>(x: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let ohw = g.out_hw();
    let mut cols = vec![T::zero(); g.col_rows() * n * ohw];
    let plane = g.in_h * g.in_w;
    for ci in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                for b in 0..n {
                    let src = &x[b * g.in_len() + ci * plane..][..plane];
                    let dst = &mut cols[(row * n + b) * ohw..][..ohw];
                    for oh in 0..g.out_h {
                        let Some(ih) = g.src(oh, ki, g.in_h) else { continue };
                        for ow in 0..g.out_w {
                            if let Some(iw) = g.src(ow, kj, g.in_w) {
                                dst[oh * g.out_w + ow] = src[ih * g.in_w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let ohw = g.out_hw();
    let plane = g.in_h * g.in_w;
    let mut dx = vec![T::zero(); n * g.in_len()];
    for ci in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                for b in 0..n {
                    let src = &cols[(row * n + b) * ohw..][..ohw];
                    let dst = &mut dx[b * g.in_len() + ci * plane..][..plane];
                    for oh in 0..g.out_h {
                        let Some(ih) = g.src(oh, ki, g.in_h) else { continue };
                        for ow in 0..g.out_w {
                            if let Some(iw) = g.src(ow, kj, g.in_w) {
                                dst[ih * g.in_w + iw] += src[oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns the output and the im2col buffer needed for the backward pass.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], n: usize, g: &ConvGeom, w: &[T], bias: &[T]) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, n, g);
    let ohw = g.out_hw();
    let mut tmp = vec![T::zero(); g.out_c * n * ohw];
    gemm(false, false, g.out_c, n * ohw, g.col_rows(), T::one(), w, &cols, T::zero(), &mut tmp);
    let mut y = vec![T::zero(); n * g.out_c * ohw];
    for o in 0..g.out_c {
        for b in 0..n {
            let src = &tmp[(o * n + b) * ohw..][..ohw];
            let dst = &mut y[(b * g.out_c + o) * ohw..][..ohw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias[o];
            }
        }
    }
    (y, cols)
}

/// Accumulates into `dw`, `db`; returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    dy: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cols: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let ohw = g.out_hw();
    let mut dyt = vec![T::zero(); g.out_c * n * ohw];
    for b in 0..n {
        for o in 0..g.out_c {
            let src = &dy[(b * g.out_c + o) * ohw..][..ohw];
            dyt[(o * n + b) * ohw..][..ohw].copy_from_slice(src);
            db[o] += src.iter().copied().sum::<T>();
        }
    }
    gemm(false, true, g.out_c, g.col_rows(), n * ohw, T::one(), &dyt, cols, T::one(), dw);
    if !need_dx {
        return Vec::new();
    }
    let mut dcols = vec![T::zero(); g.col_rows() * n * ohw];
    gemm(true, false, g.col_rows(), n * ohw, g.out_c, T::one(), w, &dyt, T::zero(), &mut dcols);
    col2im(&dcols, n, g)
}

pub(crate) fn linear_forward<T: Scalar>(x: &[T], n: usize, in_f: usize, out_f: usize, w: &[T], bias: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); n * out_f];
    for row in y.chunks_exact_mut(out_f) {
        row.copy_from_slice(bias);
    }
    gemm(false, true, n, out_f, in_f, T::one(), x, w, T::one(), &mut y);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    n: usize,
    in_f: usize,
    out_f: usize,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    gemm(true, false, out_f, in_f, n, T::one(), dy, x, T::one(), dw);
    for row in dy.chunks_exact(out_f) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); n * in_f];
    gemm(false, false, n, in_f, out_f, T::one(), dy, w, T::zero(), &mut dx);
    dx
}

/// Max pooling with implicit `-inf` padding. `argmax` holds the flat input
/// index of each output's winner, or `u32::MAX` for an all-padding window.
pub(crate) fn pool_forward<T: Scalar>(x: &[T], n: usize, g: &ConvGeom) -> (Vec<T>, Vec<u32>) {
    let plane = g.in_h * g.in_w;
    let out_len = n * g.in_c * g.out_hw();
    let mut y = vec![T::zero(); out_len];
    let mut arg = vec![u32::MAX; out_len];
    let mut idx = 0;
    for bc in 0..n * g.in_c {
        let base = bc * plane;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut at = u32::MAX;
                for ki in 0..g.k {
                    let Some(ih) = g.src(oh, ki, g.in_h) else { continue };
                    for kj in 0..g.k {
                        if let Some(iw) = g.src(ow, kj, g.in_w) {
                            let j = base + ih * g.in_w + iw;
                            if at == u32::MAX || x[j] > best {
                                best = x[j];
                                at = j as u32;
                            }
                        }
                    }
                }
                if at != u32::MAX {
                    y[idx] = best;
                }
                arg[idx] = at;
                idx += 1;
            }
        }
    }
    (y, arg)
}

pub(crate) fn pool_backward<T: Scalar>(dy: &[T], arg: &[u32], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&d, &a) in dy.iter().zip(arg) {
        if a != u32::MAX {
            dx[a as usize] += d;
        }
    }
    dx
}

pub(crate) fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

pub(crate) fn relu_backward<T: Scalar>(dy: &[T], y: &[T]) -> Vec<T> {
    dy.iter().zip(y).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect()
}

pub(crate) const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics of a `[n][c][hw]` buffer: means and biased variances.
pub(crate) fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let mu = s / count;
        let mut v = T::zero();
        for b in 0..n {
            v += x[(b * c + ch) * hw..][..hw].iter().map(|&e| (e - mu) * (e - mu)).sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Normalizes with the given statistics; returns `(y, x_hat, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_apply<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                xhat[i] = (x[i] - mean[ch]) * inv[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    (y, xhat, inv)
}

/// Backward through training-mode batch normalization.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let m = T::of((n * hw) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let (mut sd, mut sdx) = (T::zero(), T::zero());
        for b in 0..n {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                sd += dy[i];
                sdx += dy[i] * xhat[i];
            }
        }
        dgamma[ch] += sdx;
        dbeta[ch] += sd;
        // dxhat = dy * gamma; sums scale accordingly.
        let k = gamma[ch] * inv[ch] / m;
        for b in 0..n {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                dx[i] = k * (m * dy[i] - sd - xhat[i] * sdx);
            }
        }
    }
    dx
}

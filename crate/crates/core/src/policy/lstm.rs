//! Single-direction LSTM layer over a flat parameter slice, with
//! backpropagation through time.
//!
//! Parameter block layout (row-major): `w_ih` (4H x in), `w_hh` (4H x H),
//! `b` (4H). Gate rows are ordered input, forget, cell, output.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LstmShape {
    pub input: usize,
    pub hidden: usize,
}

impl LstmShape {
    pub fn len(&self) -> usize {
        let g = 4 * self.hidden;
        g * self.input + g * self.hidden + g
    }

    fn w_hh_offset(&self) -> usize {
        4 * self.hidden * self.input
    }

    fn bias_offset(&self) -> usize {
        self.w_hh_offset() + 4 * self.hidden * self.hidden
    }

    /// Offset of the forget-gate bias entries within the block.
    pub fn forget_bias_range(&self) -> std::ops::Range<usize> {
        let b = self.bias_offset();
        b + self.hidden..b + 2 * self.hidden
    }
}

#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Activated gates: i, f, g, o.
    pub gates: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn step(p: &[f64], s: LstmShape, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    debug_assert_eq!(p.len(), s.len());
    debug_assert_eq!(x.len(), s.input);
    let hd = s.hidden;
    let w_ih = &p[..s.w_hh_offset()];
    let w_hh = &p[s.w_hh_offset()..s.bias_offset()];
    let b = &p[s.bias_offset()..];
    let mut gates = b.to_vec();
    for (r, g) in gates.iter_mut().enumerate() {
        let row_i = &w_ih[r * s.input..(r + 1) * s.input];
        let row_h = &w_hh[r * hd..(r + 1) * hd];
        let mut acc = 0.0;
        for (w, v) in row_i.iter().zip(x) {
            acc += w * v;
        }
        for (w, v) in row_h.iter().zip(h_prev) {
            acc += w * v;
        }
        *g += acc;
    }
    for (r, g) in gates.iter_mut().enumerate() {
        *g = if (2 * hd..3 * hd).contains(&r) { g.tanh() } else { sigmoid(*g) };
    }
    let mut c = vec![0.0; hd];
    let mut tanh_c = vec![0.0; hd];
    let mut h = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    StepCache { x: x.to_vec(), h_prev: h_prev.to_vec(), c_prev: c_prev.to_vec(), gates, tanh_c, c, h }
}

/// Runs the layer over `xs` in the given order from a zero state.
pub(crate) fn forward_seq(p: &[f64], s: LstmShape, xs: &[Vec<f64>]) -> Vec<StepCache> {
    let mut h = vec![0.0; s.hidden];
    let mut c = vec![0.0; s.hidden];
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let cache = step(p, s, x, &h, &c);
        h.clone_from(&cache.h);
        c.clone_from(&cache.c);
        out.push(cache);
    }
    out
}

/// Backpropagates `dh[t]` (loss gradient w.r.t. each output hidden state)
/// through the sequence. Parameter gradients are accumulated into `grad`;
/// the returned vectors are the gradients w.r.t. each input `x_t`.
pub(crate) fn backward_seq(
    p: &[f64],
    s: LstmShape,
    caches: &[StepCache],
    dh: &[Vec<f64>],
    grad: &mut [f64],
) -> Vec<Vec<f64>> {
    debug_assert_eq!(grad.len(), s.len());
    let hd = s.hidden;
    let (w_hh_off, b_off) = (s.w_hh_offset(), s.bias_offset());
    let mut dx = vec![vec![0.0; s.input]; caches.len()];
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut da = vec![0.0; 4 * hd];
    for t in (0..caches.len()).rev() {
        let cache = &caches[t];
        for j in 0..hd {
            let dh_t = dh[t][j] + dh_next[j];
            let (i, f, g, o) = (cache.gates[j], cache.gates[hd + j], cache.gates[2 * hd + j], cache.gates[3 * hd + j]);
            let tc = cache.tanh_c[j];
            let d_o = dh_t * tc;
            let dc = dh_t * o * (1.0 - tc * tc) + dc_next[j];
            let di = dc * g;
            let dg = dc * i;
            let df = dc * cache.c_prev[j];
            dc_next[j] = dc * f;
            da[j] = di * i * (1.0 - i);
            da[hd + j] = df * f * (1.0 - f);
            da[2 * hd + j] = dg * (1.0 - g * g);
            da[3 * hd + j] = d_o * o * (1.0 - o);
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        let dx_t = &mut dx[t];
        for (r, &d) in da.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let wi = r * s.input;
            for (k, &xv) in cache.x.iter().enumerate() {
                grad[wi + k] += d * xv;
                dx_t[k] += p[wi + k] * d;
            }
            let wh = w_hh_off + r * hd;
            for (k, &hv) in cache.h_prev.iter().enumerate() {
                grad[wh + k] += d * hv;
                dh_next[k] += p[wh + k] * d;
            }
            grad[b_off + r] += d;
        }
    }
    dx
}

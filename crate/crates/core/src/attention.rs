//! Scale-free multi-head cross-attention.
//!
//! Queries come from the image tokens `X`, keys and values from the point
//! tokens `Y`:
//!
//! ```text
//! Q_i = RMSNorm(LayerNorm(X) Wq_i)
//! K_i = RMSNorm(Y Wk_i)
//! V_i = Y Wv_i
//! A_i = softmax(Q_i K_i^T) V_i        (no 1/sqrt(d) scaling)
//! O   = [A_1 ; .. ; A_h] Wo
//! ```
//!
//! Both normalizations divide by `(statistic + NORM_EPS)`. The reverse-mode
//! pass in [`cross_attend_grad`] differentiates this exact composition.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::checkpoint::{NamedTensors, TensorVisitor, TensorVisitorMut};
use crate::embedding::TokenSequence;
use crate::error::{CalibError, Result};
use crate::par::{self, Parallelism};
use crate::tensor::gaussian;

pub const NORM_EPS: f64 = 1e-6;
pub const DEFAULT_HEADS: usize = 6;
pub const DEFAULT_HEAD_DIM: usize = 64;

/// Per-head projections and RMSNorm gains.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub gain_q: Array1<f64>,
    pub gain_k: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// `(h * d_h) x D_out`; rows `i*d_h..(i+1)*d_h` belong to head `i`.
    pub w_o: Array2<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
}

impl AttentionParams {
    /// Seeded Gaussian projections (std `1/sqrt(fan_in)`), unit norm gains,
    /// zero LayerNorm bias.
    pub fn random<R: Rng>(rng: &mut R, d_in: usize, heads: usize, head_dim: usize, d_out: usize) -> Self {
        let heads = (0..heads)
            .map(|_| HeadParams {
                w_q: gaussian(rng, d_in, head_dim),
                w_k: gaussian(rng, d_in, head_dim),
                w_v: gaussian(rng, d_in, head_dim),
                gain_q: Array1::ones(head_dim),
                gain_k: Array1::ones(head_dim),
            })
            .collect::<Vec<_>>();
        let w_o = gaussian(rng, heads.len() * head_dim, d_out);
        Self {
            heads,
            w_o,
            ln_gain: Array1::ones(d_in),
            ln_bias: Array1::zeros(d_in),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    w_q: Array2::zeros(h.w_q.raw_dim()),
                    w_k: Array2::zeros(h.w_k.raw_dim()),
                    w_v: Array2::zeros(h.w_v.raw_dim()),
                    gain_q: Array1::zeros(h.gain_q.len()),
                    gain_k: Array1::zeros(h.gain_k.len()),
                })
                .collect(),
            w_o: Array2::zeros(self.w_o.raw_dim()),
            ln_gain: Array1::zeros(self.ln_gain.len()),
            ln_bias: Array1::zeros(self.ln_bias.len()),
        }
    }

    pub fn d_in(&self) -> usize {
        self.ln_gain.len()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.w_q.ncols())
    }

    pub fn d_out(&self) -> usize {
        self.w_o.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, dh) = (self.d_in(), self.head_dim());
        if self.heads.is_empty() || dh == 0 {
            return Err(CalibError::shape("attention needs at least one head of width >= 1"));
        }
        if self.ln_bias.len() != d_in {
            return Err(CalibError::shape("LayerNorm gain and bias lengths differ"));
        }
        for (i, h) in self.heads.iter().enumerate() {
            let ok = [&h.w_q, &h.w_k, &h.w_v].iter().all(|w| w.dim() == (d_in, dh))
                && h.gain_q.len() == dh
                && h.gain_k.len() == dh;
            if !ok {
                return Err(CalibError::shape(format!("head {i} parameters are not {d_in}x{dh}")));
            }
        }
        if self.w_o.nrows() != self.heads.len() * dh {
            return Err(CalibError::shape(format!(
                "output projection has {} rows, expected h*d_h = {}",
                self.w_o.nrows(),
                self.heads.len() * dh
            )));
        }
        Ok(())
    }
}

impl NamedTensors for AttentionParams {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        for (i, h) in self.heads.iter().enumerate() {
            f(&format!("head{i}.w_q"), &[h.w_q.nrows(), h.w_q.ncols()], h.w_q.as_slice().unwrap());
            f(&format!("head{i}.w_k"), &[h.w_k.nrows(), h.w_k.ncols()], h.w_k.as_slice().unwrap());
            f(&format!("head{i}.w_v"), &[h.w_v.nrows(), h.w_v.ncols()], h.w_v.as_slice().unwrap());
            f(&format!("head{i}.gain_q"), &[h.gain_q.len()], h.gain_q.as_slice().unwrap());
            f(&format!("head{i}.gain_k"), &[h.gain_k.len()], h.gain_k.as_slice().unwrap());
        }
        f("w_o", &[self.w_o.nrows(), self.w_o.ncols()], self.w_o.as_slice().unwrap());
        f("ln_gain", &[self.ln_gain.len()], self.ln_gain.as_slice().unwrap());
        f("ln_bias", &[self.ln_bias.len()], self.ln_bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            let (r, c) = h.w_q.dim();
            f(&format!("head{i}.w_q"), &[r, c], h.w_q.as_slice_mut().unwrap());
            f(&format!("head{i}.w_k"), &[r, c], h.w_k.as_slice_mut().unwrap());
            f(&format!("head{i}.w_v"), &[r, c], h.w_v.as_slice_mut().unwrap());
            let n = h.gain_q.len();
            f(&format!("head{i}.gain_q"), &[n], h.gain_q.as_slice_mut().unwrap());
            f(&format!("head{i}.gain_k"), &[n], h.gain_k.as_slice_mut().unwrap());
        }
        let (r, c) = self.w_o.dim();
        f("w_o", &[r, c], self.w_o.as_slice_mut().unwrap());
        let n = self.ln_gain.len();
        f("ln_gain", &[n], self.ln_gain.as_slice_mut().unwrap());
        f("ln_bias", &[n], self.ln_bias.as_slice_mut().unwrap());
    }
}

/// Row-wise `(x - mean) / (std + eps) * gain + bias`.
pub fn layer_norm(x: ArrayView2<'_, f64>, gain: ArrayView1<'_, f64>, bias: ArrayView1<'_, f64>) -> Array2<f64> {
    layer_norm_parts(x).0 * gain + bias
}

/// Returns the normalized rows and the per-row `(std, std + eps)`.
fn layer_norm_parts(x: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<(f64, f64)>) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut stats = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let std = (row.mapv(|v| v * v).sum() / n).sqrt();
        let s = std + NORM_EPS;
        row.mapv_inplace(|v| v / s);
        stats.push((std, s));
    }
    (xhat, stats)
}

/// Row-wise `x / (rms + eps) * gain`.
pub fn rms_norm(x: ArrayView2<'_, f64>, gain: ArrayView1<'_, f64>) -> Array2<f64> {
    rms_norm_parts(x).0 * gain
}

fn rms_norm_parts(x: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<(f64, f64)>) {
    let n = x.ncols() as f64;
    let mut out = x.to_owned();
    let mut stats = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let rms = (row.mapv(|v| v * v).sum() / n).sqrt();
        let s = rms + NORM_EPS;
        row.mapv_inplace(|v| v / s);
        stats.push((rms, s));
    }
    (out, stats)
}

/// Raw attention logits `Q K^T`.
pub fn logits(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>) -> Array2<f64> {
    q.dot(&k.t())
}

/// Softmax over each row, with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `N_q x D_out`.
    pub output: Array2<f64>,
    /// One `N_q x N_kv` matrix per head.
    pub attn_weights: Vec<Array2<f64>>,
}

struct HeadCache {
    q_pre: Array2<f64>,
    q_unit: Array2<f64>,
    q_stats: Vec<(f64, f64)>,
    q: Array2<f64>,
    k_pre: Array2<f64>,
    k_unit: Array2<f64>,
    k_stats: Vec<(f64, f64)>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
}

struct ForwardCache {
    xhat: Array2<f64>,
    ln_stats: Vec<(f64, f64)>,
    xn: Array2<f64>,
    heads: Vec<HeadCache>,
    concat: Array2<f64>,
    output: Array2<f64>,
}

fn check_inputs(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, params: &AttentionParams) -> Result<()> {
    params.validate()?;
    let d = params.d_in();
    if x.ncols() != d || y.ncols() != d {
        return Err(CalibError::shape(format!(
            "token widths {} (query) / {} (key) do not match attention input width {d}",
            x.ncols(),
            y.ncols()
        )));
    }
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(CalibError::EmptyInput("attention needs at least one query and one key".into()));
    }
    Ok(())
}

fn forward_cached(
    mode: Parallelism,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    params: &AttentionParams,
) -> Result<ForwardCache> {
    check_inputs(x, y, params)?;
    let (xhat, ln_stats) = layer_norm_parts(x);
    let xn = &xhat * &params.ln_gain + &params.ln_bias;
    let heads = par::map_slice(mode, &params.heads, |h| {
        let q_pre = xn.dot(&h.w_q);
        let (q_unit, q_stats) = rms_norm_parts(q_pre.view());
        let q = &q_unit * &h.gain_q;
        let k_pre = y.dot(&h.w_k);
        let (k_unit, k_stats) = rms_norm_parts(k_pre.view());
        let k = &k_unit * &h.gain_k;
        let v = y.dot(&h.w_v);
        let p = softmax_rows(&logits(q.view(), k.view()));
        HeadCache {
            q_pre,
            q_unit,
            q_stats,
            q,
            k_pre,
            k_unit,
            k_stats,
            k,
            v,
            p,
        }
    });
    let dh = params.head_dim();
    let mut concat = Array2::zeros((x.nrows(), dh * heads.len()));
    for (i, h) in heads.iter().enumerate() {
        concat.slice_mut(s![.., i * dh..(i + 1) * dh]).assign(&h.p.dot(&h.v));
    }
    let output = concat.dot(&params.w_o);
    Ok(ForwardCache {
        xhat,
        ln_stats,
        xn,
        heads,
        concat,
        output,
    })
}

/// Cross-attention on raw token matrices.
pub fn cross_attend_raw(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let cache = forward_cached(Parallelism::default(), x, y, params)?;
    Ok(AttentionOutput {
        output: cache.output,
        attn_weights: cache.heads.into_iter().map(|h| h.p).collect(),
    })
}

/// Image tokens `x` attend to point tokens `y`.
pub fn cross_attend(x: &TokenSequence, y: &TokenSequence, params: &AttentionParams) -> Result<AttentionOutput> {
    cross_attend_raw(x.embedded.view(), y.embedded.view(), params)
}

/// Gradients of `sum(O * upstream)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub d_x: Array2<f64>,
    pub d_y: Array2<f64>,
    pub params: AttentionParams,
}

/// Backward pass of the unit-gain RMS/LayerNorm core: given `d_unit` for
/// `unit = v / s` with `s = stat + eps` and `stat = sqrt(mean(v^2))`,
/// returns `d_v` row by row.
fn norm_core_backward(v: &Array2<f64>, stats: &[(f64, f64)], d_unit: &Array2<f64>) -> Array2<f64> {
    let n = v.ncols() as f64;
    let mut out = Array2::zeros(v.raw_dim());
    for (r, &(stat, s)) in stats.iter().enumerate() {
        let vr = v.row(r);
        let gr = d_unit.row(r);
        let dot: f64 = vr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        let coeff = if stat > 0.0 { dot / (s * s * n * stat) } else { 0.0 };
        let mut orow = out.row_mut(r);
        for ((o, &g), &x) in orow.iter_mut().zip(gr.iter()).zip(vr.iter()) {
            *o = g / s - coeff * x;
        }
    }
    out
}

pub fn cross_attend_grad_raw(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    params: &AttentionParams,
    upstream: ArrayView2<'_, f64>,
) -> Result<AttentionGrads> {
    let cache = forward_cached(Parallelism::default(), x, y, params)?;
    if upstream.dim() != cache.output.dim() {
        return Err(CalibError::shape(format!(
            "upstream gradient is {:?}, output is {:?}",
            upstream.dim(),
            cache.output.dim()
        )));
    }
    let dh = params.head_dim();
    let mut grads = params.zeros_like();
    grads.w_o = cache.concat.t().dot(&upstream);
    let d_concat = upstream.dot(&params.w_o.t());

    let mut d_xn = Array2::<f64>::zeros(cache.xn.raw_dim());
    let mut d_y = Array2::<f64>::zeros(y.raw_dim());
    for (i, (h, hc)) in params.heads.iter().zip(&cache.heads).enumerate() {
        let g = &mut grads.heads[i];
        let d_a = d_concat.slice(s![.., i * dh..(i + 1) * dh]);
        // A = P V
        let d_p = d_a.dot(&hc.v.t());
        let d_v = hc.p.t().dot(&d_a);
        // softmax rows
        let row_dot = (&d_p * &hc.p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_s = &hc.p * &(&d_p - &row_dot);
        // S = Q K^T
        let d_q = d_s.dot(&hc.k);
        let d_k = d_s.t().dot(&hc.q);
        // gains
        g.gain_q = (&d_q * &hc.q_unit).sum_axis(Axis(0));
        g.gain_k = (&d_k * &hc.k_unit).sum_axis(Axis(0));
        let d_q_pre = norm_core_backward(&hc.q_pre, &hc.q_stats, &(&d_q * &h.gain_q));
        let d_k_pre = norm_core_backward(&hc.k_pre, &hc.k_stats, &(&d_k * &h.gain_k));
        // projections
        g.w_q = cache.xn.t().dot(&d_q_pre);
        g.w_k = y.t().dot(&d_k_pre);
        g.w_v = y.t().dot(&d_v);
        d_xn += &d_q_pre.dot(&h.w_q.t());
        d_y += &d_k_pre.dot(&h.w_k.t());
        d_y += &d_v.dot(&h.w_v.t());
    }

    // LayerNorm: xn = xhat * gain + bias, xhat = c / (std(c) + eps), c = x - mean
    grads.ln_bias = d_xn.sum_axis(Axis(0));
    grads.ln_gain = (&d_xn * &cache.xhat).sum_axis(Axis(0));
    let d_xhat = &d_xn * &params.ln_gain;
    let centered = {
        let mut c = x.to_owned();
        for mut row in c.rows_mut() {
            let m = row.mean().unwrap_or(0.0);
            row.mapv_inplace(|v| v - m);
        }
        c
    };
    let mut d_x = norm_core_backward(&centered, &cache.ln_stats, &d_xhat);
    for mut row in d_x.rows_mut() {
        let m = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|v| v - m);
    }
    Ok(AttentionGrads {
        d_x,
        d_y,
        params: grads,
    })
}

pub fn cross_attend_grad(
    x: &TokenSequence,
    y: &TokenSequence,
    params: &AttentionParams,
    upstream: ArrayView2<'_, f64>,
) -> Result<AttentionGrads> {
    cross_attend_grad_raw(x.embedded.view(), y.embedded.view(), params, upstream)
}

/// Whether the rotational and translational heads see separate attention
/// blocks or share the rotational one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchMode {
    #[default]
    Dual,
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualAttention {
    pub rot: AttentionParams,
    pub tsl: AttentionParams,
    pub mode: BranchMode,
}

impl DualAttention {
    pub fn forward(&self, x: &TokenSequence, y: &TokenSequence) -> Result<(AttentionOutput, AttentionOutput)> {
        match self.mode {
            BranchMode::Dual => dual_branch(x, y, &self.rot, &self.tsl),
            BranchMode::Shared => {
                let o = cross_attend(x, y, &self.rot)?;
                Ok((o.clone(), o))
            }
        }
    }
}

/// Two independent cross-attention blocks over the same tokens.
pub fn dual_branch(
    x: &TokenSequence,
    y: &TokenSequence,
    params_rot: &AttentionParams,
    params_tsl: &AttentionParams,
) -> Result<(AttentionOutput, AttentionOutput)> {
    Ok((cross_attend(x, y, params_rot)?, cross_attend(x, y, params_tsl)?))
}

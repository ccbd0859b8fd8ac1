//! Central-difference verification of the analytic attention and
//! attention-plus-regressor gradients.
//!
//! The scalar probed is `L = sum(O * U)` for a fixed random upstream `U`.
//! Every entry of the inputs and of every parameter tensor is checked;
//! the reported figure is the largest relative error
//! `|a - n| / max(|a| + |n|, floor)`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::Serialize;

use crate::attention::{cross_attend_grad_raw, cross_attend_raw, AttentionParams};
use crate::checkpoint::NamedTensors;
use crate::error::{CalibError, Result};
use crate::regressor::BranchHead;
use crate::rng;
use crate::tensor::gaussian;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so entries whose true gradient is ~0 are judged on
/// absolute error.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub n_q: usize,
    pub n_kv: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl AttentionDims {
    pub const SMALL: AttentionDims = AttentionDims {
        n_q: 5,
        n_kv: 7,
        heads: 2,
        head_dim: 3,
        d_in: 6,
        d_out: 4,
    };

    fn validate(&self) -> Result<()> {
        let all = [self.n_q, self.n_kv, self.heads, self.head_dim, self.d_in, self.d_out];
        if all.contains(&0) {
            return Err(CalibError::InvalidArgument(format!("gradient check sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Tensor and flat index of the worst entry.
    pub worst: String,
    pub checked: usize,
    pub passed: bool,
}

#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FLOOR)
}

#[derive(Default)]
struct Tracker {
    max: f64,
    worst: String,
    checked: usize,
}

impl Tracker {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max || self.worst.is_empty() {
            self.max = self.max.max(e);
            self.worst = format!("{name}[{idx}]");
        }
    }

    fn report(self) -> GradcheckReport {
        GradcheckReport {
            passed: self.max < TOLERANCE && self.max.is_finite(),
            max_rel_err: self.max,
            worst: self.worst,
            checked: self.checked,
        }
    }
}

fn central<F: FnMut(f64) -> Result<f64>>(mut loss_at: F) -> Result<f64> {
    Ok((loss_at(STEP)? - loss_at(-STEP)?) / (2.0 * STEP))
}

/// Flattened view of all tensors, in visit order.
fn flatten_params<P: NamedTensors>(p: &P) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit(&mut |name, _, data| out.push((name.to_string(), data.to_vec())));
    out
}

/// Sets entry `idx` of tensor number `tensor`.
fn set_entry<P: NamedTensors>(p: &mut P, tensor: usize, idx: usize, value: f64) {
    let mut t = 0;
    p.visit_mut(&mut |_, _, data| {
        if t == tensor {
            data[idx] = value;
        }
        t += 1;
    });
}

fn check_matrix<F>(tr: &mut Tracker, name: &str, base: &Array2<f64>, analytic: &Array2<f64>, mut loss: F) -> Result<()>
where
    F: FnMut(&Array2<f64>) -> Result<f64>,
{
    let mut probe = base.clone();
    for (idx, (&a, &b)) in analytic.iter().zip(base.iter()).enumerate() {
        let (r, c) = (idx / base.ncols(), idx % base.ncols());
        let n = central(|d| {
            probe[(r, c)] = b + d;
            loss(&probe)
        })?;
        probe[(r, c)] = b;
        tr.record(name, idx, a, n);
    }
    Ok(())
}

fn check_params<P, F>(tr: &mut Tracker, prefix: &str, base: &P, analytic: &P, mut loss: F) -> Result<()>
where
    P: NamedTensors + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let values = flatten_params(base);
    let grads = flatten_params(analytic);
    let mut probe = base.clone();
    for (t, ((name, vals), (_, g))) in values.iter().zip(&grads).enumerate() {
        for idx in 0..vals.len() {
            let b = vals[idx];
            let n = central(|d| {
                set_entry(&mut probe, t, idx, b + d);
                loss(&probe)
            })?;
            set_entry(&mut probe, t, idx, b);
            tr.record(&format!("{prefix}{name}"), idx, g[idx], n);
        }
    }
    Ok(())
}

fn dot(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Randomizes the otherwise-unit norm gains and zero bias so their
/// gradients are exercised away from the trivial point.
fn jitter_norms<R: Rng>(p: &mut AttentionParams, rng: &mut R) {
    let mut j = |v: &mut Array1<f64>, center: f64| v.mapv_inplace(|_| center + rng.random_range(-0.5..0.5));
    for h in &mut p.heads {
        j(&mut h.gain_q, 1.0);
        j(&mut h.gain_k, 1.0);
    }
    j(&mut p.ln_gain, 1.0);
    j(&mut p.ln_bias, 0.0);
}

/// Checks every gradient of the cross-attention block. `corrupt` perturbs one
/// analytic entry as a negative control.
pub fn attention_gradcheck(seed: u64, dims: AttentionDims, corrupt: bool) -> Result<GradcheckReport> {
    dims.validate()?;
    let mut g = rng::stream(seed, rng::streams::GRADCHECK);
    let x = gaussian(&mut g, dims.n_q, dims.d_in) * (dims.d_in as f64).sqrt();
    let y = gaussian(&mut g, dims.n_kv, dims.d_in) * (dims.d_in as f64).sqrt();
    let mut params = AttentionParams::random(&mut g, dims.d_in, dims.heads, dims.head_dim, dims.d_out);
    jitter_norms(&mut params, &mut g);
    let u = gaussian(&mut g, dims.n_q, dims.d_out) * (dims.n_q as f64).sqrt();

    let loss = |x: &Array2<f64>, y: &Array2<f64>, p: &AttentionParams| -> Result<f64> {
        Ok(dot(cross_attend_raw(x.view(), y.view(), p)?.output.view(), u.view()))
    };
    let mut grads = cross_attend_grad_raw(x.view(), y.view(), &params, u.view())?;
    if corrupt {
        grads.d_x[(0, 0)] += 1e-2 * (grads.d_x[(0, 0)].abs() + 1.0);
    }

    let mut tr = Tracker::default();
    check_matrix(&mut tr, "x", &x, &grads.d_x, |xp| loss(xp, &y, &params))?;
    check_matrix(&mut tr, "y", &y, &grads.d_y, |yp| loss(&x, yp, &params))?;
    check_params(&mut tr, "", &params, &grads.params, |pp| loss(&x, &y, pp))?;
    Ok(tr.report())
}

/// Grid and widths of the end-to-end check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndToEndDims {
    pub rows: usize,
    pub cols: usize,
    pub n_kv: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_in: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
}

impl Default for EndToEndDims {
    fn default() -> Self {
        Self {
            rows: 2,
            cols: 3,
            n_kv: 5,
            heads: 2,
            head_dim: 3,
            d_in: 6,
            channels: vec![4, 3, 2],
            hidden: 5,
        }
    }
}

/// Checks d(u . xi)/d{X, Y, attention params} through both attention
/// branches and both regression heads.
pub fn end_to_end_gradcheck(seed: u64, dims: &EndToEndDims) -> Result<GradcheckReport> {
    if dims.channels.len() < 2 {
        return Err(CalibError::InvalidArgument("channel plan needs at least two entries".into()));
    }
    let mut g = rng::stream(seed, rng::streams::GRADCHECK);
    let n_q = dims.rows * dims.cols;
    let d_out = dims.channels[0];
    let x = gaussian(&mut g, n_q, dims.d_in) * (dims.d_in as f64).sqrt();
    let y = gaussian(&mut g, dims.n_kv, dims.d_in) * (dims.d_in as f64).sqrt();
    let mut p_rot = AttentionParams::random(&mut g, dims.d_in, dims.heads, dims.head_dim, d_out);
    let mut p_tsl = AttentionParams::random(&mut g, dims.d_in, dims.heads, dims.head_dim, d_out);
    jitter_norms(&mut p_rot, &mut g);
    jitter_norms(&mut p_tsl, &mut g);
    let h_rot = BranchHead::random(&mut g, &dims.channels, 3, dims.hidden);
    let h_tsl = BranchHead::random(&mut g, &dims.channels, 3, dims.hidden);
    let u: [f64; 6] = std::array::from_fn(|_| g.random_range(-1.0..1.0));
    let (u_rot, u_tsl) = ([u[0], u[1], u[2]], [u[3], u[4], u[5]]);
    let (rows, cols) = (dims.rows, dims.cols);

    let branch = |x: &Array2<f64>, y: &Array2<f64>, p: &AttentionParams, h: &BranchHead, up: [f64; 3]| -> Result<f64> {
        let o = cross_attend_raw(x.view(), y.view(), p)?.output;
        let xi = h.forward(o.view(), rows, cols)?;
        Ok(xi.iter().zip(up).map(|(a, b)| a * b).sum())
    };
    let loss = |x: &Array2<f64>, y: &Array2<f64>, pr: &AttentionParams, pt: &AttentionParams| -> Result<f64> {
        Ok(branch(x, y, pr, &h_rot, u_rot)? + branch(x, y, pt, &h_tsl, u_tsl)?)
    };

    let analytic = |p: &AttentionParams, h: &BranchHead, up: [f64; 3]| -> Result<_> {
        let o = cross_attend_raw(x.view(), y.view(), p)?.output;
        let (_, d_o) = h.forward_with_grad(o.view(), rows, cols, Some(up))?;
        cross_attend_grad_raw(x.view(), y.view(), p, d_o.expect("upstream given").view())
    };
    let g_rot = analytic(&p_rot, &h_rot, u_rot)?;
    let g_tsl = analytic(&p_tsl, &h_tsl, u_tsl)?;
    let d_x = &g_rot.d_x + &g_tsl.d_x;
    let d_y = &g_rot.d_y + &g_tsl.d_y;

    let mut tr = Tracker::default();
    check_matrix(&mut tr, "x", &x, &d_x, |xp| loss(xp, &y, &p_rot, &p_tsl))?;
    check_matrix(&mut tr, "y", &y, &d_y, |yp| loss(&x, yp, &p_rot, &p_tsl))?;
    check_params(&mut tr, "rot.", &p_rot, &g_rot.params, |pp| loss(&x, &y, pp, &p_tsl))?;
    check_params(&mut tr, "tsl.", &p_tsl, &g_tsl.params, |pp| loss(&x, &y, &p_rot, pp))?;
    Ok(tr.report())
}

//! Aggregation head: attention tokens are unflattened back onto the patch
//! grid, passed through two residual blocks, globally average-pooled and
//! regressed to a 3-vector by a small MLP. The rotational and translational
//! branches have separate parameters.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::NORM_EPS;
use crate::checkpoint::{visit_prefixed, visit_prefixed_mut, NamedTensors, TensorVisitor, TensorVisitorMut};
use crate::error::{CalibError, Result};
use crate::geometry::Se3Tangent;
use crate::tensor::{silu, silu_grad, Dense};

pub const DEFAULT_CHANNELS: [usize; 3] = [384, 192, 96];
pub const DEFAULT_HIDDEN: usize = 128;

/// `(N_H * N_W) x D` tokens to a `D x N_H x N_W` map; token `i * N_W + j`
/// lands at grid cell `(i, j)`.
pub fn unflatten(tokens: ArrayView2<'_, f64>, rows: usize, cols: usize) -> Result<Array3<f64>> {
    if tokens.nrows() != rows * cols {
        return Err(CalibError::shape(format!(
            "{} tokens cannot fill a {rows}x{cols} grid",
            tokens.nrows()
        )));
    }
    let d = tokens.ncols();
    let mut out = Array3::zeros((d, rows, cols));
    for (t, row) in tokens.rows().into_iter().enumerate() {
        out.slice_mut(s![.., t / cols, t % cols]).assign(&row);
    }
    Ok(out)
}

/// Inverse of [`unflatten`].
pub fn flatten(map: ArrayView3<'_, f64>) -> Array2<f64> {
    let (d, h, w) = map.dim();
    Array2::from_shape_fn((h * w, d), |(t, c)| map[(c, t / w, t % w)])
}

/// Stride-1 convolution with odd square kernels and `k / 2` zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `C_out x C_in x k x k`.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            weight: Array4::zeros((c_out, c_in, kernel, kernel)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn random<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize) -> Self {
        let std = 1.0 / ((c_in * kernel * kernel).max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array4::from_shape_simple_fn((c_out, c_in, kernel, kernel), || normal.sample(rng)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn validate(&self) -> Result<()> {
        let (co, _, kh, kw) = self.weight.dim();
        if kh != kw || kh % 2 == 0 {
            return Err(CalibError::shape(format!("kernel must be odd and square, got {kh}x{kw}")));
        }
        if self.bias.len() != co {
            return Err(CalibError::shape("conv bias length mismatch"));
        }
        Ok(())
    }

    fn tap(&self, dy: usize, dx: usize) -> Array2<f64> {
        self.weight.slice(s![.., .., dy, dx]).to_owned()
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        self.validate()?;
        let (c, h, w) = x.dim();
        if c != self.c_in() {
            return Err(CalibError::shape(format!("conv expects {} channels, got {c}", self.c_in())));
        }
        let k = self.kernel();
        let p = k / 2;
        let mut padded = Array3::zeros((c, h + 2 * p, w + 2 * p));
        padded.slice_mut(s![.., p..p + h, p..p + w]).assign(&x);
        let mut out = Array2::zeros((self.c_out(), h * w));
        for dy in 0..k {
            for dx in 0..k {
                let window = padded
                    .slice(s![.., dy..dy + h, dx..dx + w])
                    .to_owned()
                    .into_shape_with_order((c, h * w))
                    .expect("contiguous window");
                out += &self.tap(dy, dx).dot(&window);
            }
        }
        out += &self.bias.view().insert_axis(Axis(1));
        Ok(out.into_shape_with_order((self.c_out(), h, w)).expect("matching size"))
    }

    /// Gradient with respect to the input.
    pub fn backward_input(&self, d_out: ArrayView3<'_, f64>) -> Array3<f64> {
        let (_, h, w) = d_out.dim();
        let k = self.kernel();
        let p = k / 2;
        let g = d_out.to_owned().into_shape_with_order((self.c_out(), h * w)).expect("contiguous");
        let mut d_padded = Array3::zeros((self.c_in(), h + 2 * p, w + 2 * p));
        for dy in 0..k {
            for dx in 0..k {
                let contrib = self
                    .tap(dy, dx)
                    .t()
                    .dot(&g)
                    .into_shape_with_order((self.c_in(), h, w))
                    .expect("matching size");
                let mut dst = d_padded.slice_mut(s![.., dy..dy + h, dx..dx + w]);
                dst += &contrib;
            }
        }
        d_padded.slice(s![.., p..p + h, p..p + w]).to_owned()
    }
}

/// Per-channel normalization over the spatial extent of a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

struct NormCache {
    centered: Array2<f64>,
    stats: Vec<(f64, f64)>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gain: Array1::ones(channels),
            bias: Array1::zeros(channels),
        }
    }

    fn forward_cached(&self, x: ArrayView3<'_, f64>) -> Result<(Array3<f64>, NormCache)> {
        let (c, h, w) = x.dim();
        if self.gain.len() != c || self.bias.len() != c {
            return Err(CalibError::shape(format!("norm has {} channels, input {c}", self.gain.len())));
        }
        let n = (h * w) as f64;
        let mut centered = x.to_owned().into_shape_with_order((c, h * w)).expect("contiguous");
        let mut xhat = centered.clone();
        let mut stats = Vec::with_capacity(c);
        for (mut crow, mut xrow) in centered.rows_mut().into_iter().zip(xhat.rows_mut()) {
            let mean = crow.sum() / n;
            crow.mapv_inplace(|v| v - mean);
            let std = (crow.mapv(|v| v * v).sum() / n).sqrt();
            let s = std + NORM_EPS;
            xrow.assign(&crow.mapv(|v| v / s));
            stats.push((std, s));
        }
        let out = &xhat * &self.gain.view().insert_axis(Axis(1)) + self.bias.view().insert_axis(Axis(1));
        let out = out.into_shape_with_order((c, h, w)).expect("matching size");
        Ok((out, NormCache { centered, stats }))
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    fn backward_input(&self, cache: &NormCache, d_out: ArrayView3<'_, f64>) -> Array3<f64> {
        let (c, h, w) = d_out.dim();
        let n = (h * w) as f64;
        let g = d_out.to_owned().into_shape_with_order((c, h * w)).expect("contiguous");
        let mut d_x = Array2::zeros((c, h * w));
        for ch in 0..c {
            let (std, s) = cache.stats[ch];
            let crow = cache.centered.row(ch);
            let d_xhat = g.row(ch).mapv(|v| v * self.gain[ch]);
            let dot: f64 = crow.iter().zip(d_xhat.iter()).map(|(a, b)| a * b).sum();
            let coeff = if std > 0.0 { dot / (s * s * n * std) } else { 0.0 };
            let mut dc: Array1<f64> = d_xhat.mapv(|v| v / s) - crow.mapv(|v| v * coeff);
            let m = dc.sum() / n;
            dc.mapv_inplace(|v| v - m);
            d_x.row_mut(ch).assign(&dc);
        }
        d_x.into_shape_with_order((c, h, w)).expect("matching size")
    }
}

/// conv-norm-SiLU-conv-norm plus a skip (identity, or 1x1 projection when
/// the channel count changes), then SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub norm1: InstanceNorm,
    pub conv2: Conv2d,
    pub norm2: InstanceNorm,
    pub proj: Option<Conv2d>,
}

struct BlockCache {
    n1_cache: NormCache,
    pre_act1: Array3<f64>,
    n2_cache: NormCache,
    pre_out: Array3<f64>,
}

impl ResidualBlock {
    pub fn random<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            conv1: Conv2d::random(rng, c_in, c_out, kernel),
            norm1: InstanceNorm::new(c_out),
            conv2: Conv2d::random(rng, c_out, c_out, kernel),
            norm2: InstanceNorm::new(c_out),
            proj: (c_in != c_out).then(|| Conv2d::random(rng, c_in, c_out, 1)),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            conv1: Conv2d::zeros(c_in, c_out, kernel),
            norm1: InstanceNorm::new(c_out),
            conv2: Conv2d::zeros(c_out, c_out, kernel),
            norm2: InstanceNorm::new(c_out),
            proj: (c_in != c_out).then(|| Conv2d::zeros(c_in, c_out, 1)),
        }
    }

    pub fn c_out(&self) -> usize {
        self.conv2.c_out()
    }

    fn forward_cached(&self, x: ArrayView3<'_, f64>) -> Result<(Array3<f64>, BlockCache)> {
        let c1 = self.conv1.forward(x)?;
        let (pre_act1, n1_cache) = self.norm1.forward_cached(c1.view())?;
        let a1 = pre_act1.mapv(silu);
        let c2 = self.conv2.forward(a1.view())?;
        let (n2, n2_cache) = self.norm2.forward_cached(c2.view())?;
        let skip = match &self.proj {
            Some(p) => p.forward(x)?,
            None if x.dim().0 == n2.dim().0 => x.to_owned(),
            None => return Err(CalibError::shape("identity skip needs matching channel counts")),
        };
        let pre_out = n2 + skip;
        let out = pre_out.mapv(silu);
        Ok((
            out,
            BlockCache {
                n1_cache,
                pre_act1,
                n2_cache,
                pre_out,
            },
        ))
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    fn backward_input(&self, cache: &BlockCache, d_out: ArrayView3<'_, f64>) -> Array3<f64> {
        let d_pre = &d_out * &cache.pre_out.mapv(silu_grad);
        let d_skip = match &self.proj {
            Some(p) => p.backward_input(d_pre.view()),
            None => d_pre.clone(),
        };
        let d_c2 = self.norm2.backward_input(&cache.n2_cache, d_pre.view());
        let d_a1 = self.conv2.backward_input(d_c2.view());
        let d_n1 = d_a1 * cache.pre_act1.mapv(silu_grad);
        let d_c1 = self.norm1.backward_input(&cache.n1_cache, d_n1.view());
        self.conv1.backward_input(d_c1.view()) + d_skip
    }
}

/// One regression branch: residual blocks, global average pool, MLP to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchHead {
    pub blocks: Vec<ResidualBlock>,
    pub hidden: Dense,
    pub output: Dense,
}

impl BranchHead {
    /// `channels = [D, C1, C2, ..]` gives one residual block per step.
    pub fn random<R: Rng>(rng: &mut R, channels: &[usize], kernel: usize, hidden: usize) -> Self {
        let blocks = channels
            .windows(2)
            .map(|w| ResidualBlock::random(rng, w[0], w[1], kernel))
            .collect();
        let last = *channels.last().expect("at least one channel count");
        Self {
            blocks,
            hidden: Dense::random(rng, last, hidden),
            output: Dense::random(rng, hidden, 3),
        }
    }

    pub fn zeros(channels: &[usize], kernel: usize, hidden: usize) -> Self {
        let last = *channels.last().expect("at least one channel count");
        Self {
            blocks: channels
                .windows(2)
                .map(|w| ResidualBlock::zeros(w[0], w[1], kernel))
                .collect(),
            hidden: Dense::zeros(last, hidden),
            output: Dense::zeros(hidden, 3),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.output.output_dim() != 3 {
            return Err(CalibError::shape("regression head must output 3 values"));
        }
        if self.hidden.output_dim() != self.output.input_dim() {
            return Err(CalibError::shape("MLP hidden widths disagree"));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: ArrayView2<'_, f64>, rows: usize, cols: usize) -> Result<[f64; 3]> {
        Ok(self.forward_with_grad(tokens, rows, cols, None)?.0)
    }

    /// Forward pass; with `upstream = Some(d_out)` also returns the gradient
    /// of `d_out . out` with respect to `tokens`.
    pub fn forward_with_grad(
        &self,
        tokens: ArrayView2<'_, f64>,
        rows: usize,
        cols: usize,
        upstream: Option<[f64; 3]>,
    ) -> Result<([f64; 3], Option<Array2<f64>>)> {
        self.validate()?;
        let mut map = unflatten(tokens, rows, cols)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward_cached(map.view())?;
            caches.push(cache);
            map = next;
        }
        let area = (rows * cols) as f64;
        let pooled = map.sum_axis(Axis(2)).sum_axis(Axis(1)) / area;
        let pooled = pooled.insert_axis(Axis(0));
        let pre_hidden = self.hidden.forward(pooled.view())?;
        let act = pre_hidden.mapv(silu);
        let out = self.output.forward(act.view())?;
        let xi = [out[(0, 0)], out[(0, 1)], out[(0, 2)]];

        let Some(up) = upstream else {
            return Ok((xi, None));
        };
        let d_out = Array2::from_shape_vec((1, 3), up.to_vec()).expect("1x3");
        let d_act = d_out.dot(&self.output.weight.t());
        let d_pre_hidden = d_act * pre_hidden.mapv(silu_grad);
        let d_pooled = d_pre_hidden.dot(&self.hidden.weight.t());
        let c = map.dim().0;
        let mut d_map = Array3::zeros((c, rows, cols));
        for ch in 0..c {
            d_map.slice_mut(s![ch, .., ..]).fill(d_pooled[(0, ch)] / area);
        }
        for (b, cache) in self.blocks.iter().zip(&caches).rev() {
            d_map = b.backward_input(cache, d_map.view());
        }
        Ok((xi, Some(flatten(d_map.view()))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub rot: BranchHead,
    pub tsl: BranchHead,
}

impl HeadParams {
    pub fn random<R: Rng>(rng: &mut R, channels: &[usize], kernel: usize, hidden: usize) -> Self {
        Self {
            rot: BranchHead::random(rng, channels, kernel, hidden),
            tsl: BranchHead::random(rng, channels, kernel, hidden),
        }
    }

    pub fn zeros(channels: &[usize], kernel: usize, hidden: usize) -> Self {
        Self {
            rot: BranchHead::zeros(channels, kernel, hidden),
            tsl: BranchHead::zeros(channels, kernel, hidden),
        }
    }
}

/// Regresses `xi = (xi_rot, xi_tsl)` from the two attention outputs laid out
/// on a `rows x cols` patch grid.
pub fn regress(
    o_rot: ArrayView2<'_, f64>,
    o_tsl: ArrayView2<'_, f64>,
    rows: usize,
    cols: usize,
    params: &HeadParams,
) -> Result<Se3Tangent> {
    let r = params.rot.forward(o_rot, rows, cols)?;
    let t = params.tsl.forward(o_tsl, rows, cols)?;
    Ok(Se3Tangent::from_array([r[0], r[1], r[2], t[0], t[1], t[2]]))
}

fn visit_conv(c: &Conv2d, prefix: &str, f: &mut TensorVisitor<'_>) {
    let (a, b, k, _) = c.weight.dim();
    f(&format!("{prefix}.weight"), &[a, b, k, k], c.weight.as_slice().unwrap());
    f(&format!("{prefix}.bias"), &[a], c.bias.as_slice().unwrap());
}

fn visit_conv_mut(c: &mut Conv2d, prefix: &str, f: &mut TensorVisitorMut<'_>) {
    let (a, b, k, _) = c.weight.dim();
    f(&format!("{prefix}.weight"), &[a, b, k, k], c.weight.as_slice_mut().unwrap());
    f(&format!("{prefix}.bias"), &[a], c.bias.as_slice_mut().unwrap());
}

fn visit_dense(d: &Dense, prefix: &str, f: &mut TensorVisitor<'_>) {
    let (a, b) = d.weight.dim();
    f(&format!("{prefix}.weight"), &[a, b], d.weight.as_slice().unwrap());
    f(&format!("{prefix}.bias"), &[b], d.bias.as_slice().unwrap());
}

fn visit_dense_mut(d: &mut Dense, prefix: &str, f: &mut TensorVisitorMut<'_>) {
    let (a, b) = d.weight.dim();
    f(&format!("{prefix}.weight"), &[a, b], d.weight.as_slice_mut().unwrap());
    f(&format!("{prefix}.bias"), &[b], d.bias.as_slice_mut().unwrap());
}

impl NamedTensors for BranchHead {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        for (i, b) in self.blocks.iter().enumerate() {
            visit_conv(&b.conv1, &format!("block{i}.conv1"), f);
            f(&format!("block{i}.norm1.gain"), &[b.norm1.gain.len()], b.norm1.gain.as_slice().unwrap());
            f(&format!("block{i}.norm1.bias"), &[b.norm1.bias.len()], b.norm1.bias.as_slice().unwrap());
            visit_conv(&b.conv2, &format!("block{i}.conv2"), f);
            f(&format!("block{i}.norm2.gain"), &[b.norm2.gain.len()], b.norm2.gain.as_slice().unwrap());
            f(&format!("block{i}.norm2.bias"), &[b.norm2.bias.len()], b.norm2.bias.as_slice().unwrap());
            if let Some(p) = &b.proj {
                visit_conv(p, &format!("block{i}.proj"), f);
            }
        }
        visit_dense(&self.hidden, "mlp.hidden", f);
        visit_dense(&self.output, "mlp.output", f);
    }

    fn visit_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_conv_mut(&mut b.conv1, &format!("block{i}.conv1"), f);
            let n = b.norm1.gain.len();
            f(&format!("block{i}.norm1.gain"), &[n], b.norm1.gain.as_slice_mut().unwrap());
            f(&format!("block{i}.norm1.bias"), &[n], b.norm1.bias.as_slice_mut().unwrap());
            visit_conv_mut(&mut b.conv2, &format!("block{i}.conv2"), f);
            let n = b.norm2.gain.len();
            f(&format!("block{i}.norm2.gain"), &[n], b.norm2.gain.as_slice_mut().unwrap());
            f(&format!("block{i}.norm2.bias"), &[n], b.norm2.bias.as_slice_mut().unwrap());
            if let Some(p) = &mut b.proj {
                visit_conv_mut(p, &format!("block{i}.proj"), f);
            }
        }
        visit_dense_mut(&mut self.hidden, "mlp.hidden", f);
        visit_dense_mut(&mut self.output, "mlp.output", f);
    }
}

impl NamedTensors for HeadParams {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        visit_prefixed(&self.rot, "rot", f);
        visit_prefixed(&self.tsl, "tsl", f);
    }

    fn visit_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        visit_prefixed_mut(&mut self.rot, "rot", f);
        visit_prefixed_mut(&mut self.tsl, "tsl", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand3(g: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_simple_fn((c, h, w), || g.random_range(-1.0..1.0))
    }

    /// Sliding-window reference convolution.
    fn naive_conv(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let k = conv.kernel() as isize;
        let p = k / 2;
        Array3::from_shape_fn((conv.c_out(), h, w), |(o, y, xx)| {
            let mut acc = conv.bias[o];
            for ci in 0..c {
                for dy in 0..k {
                    for dx in 0..k {
                        let (sy, sx) = (y as isize + dy - p, xx as isize + dx - p);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += conv.weight[(o, ci, dy as usize, dx as usize)] * x[(ci, sy as usize, sx as usize)];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn unflatten_roundtrip_and_indexing() {
        let t = Array2::from_shape_fn((6, 4), |(r, c)| (r * 10 + c) as f64);
        let m = unflatten(t.view(), 2, 3).unwrap();
        assert_eq!(m[(2, 1, 2)], t[(3 + 2, 2)]);
        assert_eq!(flatten(m.view()), t);
        let one = unflatten(t.slice(s![..1, ..]), 1, 1).unwrap();
        assert_eq!(one.dim(), (4, 1, 1));
        assert!(unflatten(t.view(), 2, 2).is_err());
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut g = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::random(&mut g, 3, 4, 3);
        conv.bias = Array1::from_shape_simple_fn(4, || g.random_range(-1.0..1.0));
        let x = rand3(&mut g, 3, 5, 4);
        let y = conv.forward(x.view()).unwrap();
        let r = naive_conv(&conv, &x);
        let d = (&y - &r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn block_with_zero_convs_is_silu() {
        let block = ResidualBlock::zeros(4, 4, 3);
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let x = rand3(&mut g, 4, 3, 5);
        let y = block.forward(x.view()).unwrap();
        assert_eq!(y, x.mapv(silu));
    }

    #[test]
    fn block_preserves_spatial_dims() {
        let mut g = ChaCha8Rng::seed_from_u64(4);
        let block = ResidualBlock::random(&mut g, 6, 3, 3);
        for (h, w) in [(1, 1), (2, 7), (5, 3)] {
            let x = rand3(&mut g, 6, h, w);
            assert_eq!(block.forward(x.view()).unwrap().dim(), (3, h, w));
        }
        assert!(block.forward(rand3(&mut g, 5, 2, 2).view()).is_err());
    }

    #[test]
    fn zero_network_regresses_zero() {
        let params = HeadParams::zeros(&[8, 6, 4], 3, 5);
        let o = Array2::zeros((6, 8));
        let xi = regress(o.view(), o.view(), 2, 3, &params).unwrap();
        assert_eq!(xi, Se3Tangent::zero());
    }

    #[test]
    fn branches_are_independent() {
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let params = HeadParams::random(&mut g, &[8, 6, 4], 3, 5);
        let o_rot = Array2::from_shape_simple_fn((6, 8), || g.random_range(-1.0..1.0));
        let o_tsl = Array2::from_shape_simple_fn((6, 8), || g.random_range(-1.0..1.0));
        let a = regress(o_rot.view(), o_tsl.view(), 2, 3, &params).unwrap();
        let b = regress((&o_rot * 3.0).view(), o_tsl.view(), 2, 3, &params).unwrap();
        assert_eq!(a.tsl, b.tsl);
    }

    #[test]
    fn pointwise_kernels_make_grid_order_irrelevant() {
        let mut g = ChaCha8Rng::seed_from_u64(6);
        let params = HeadParams::random(&mut g, &[5, 4, 3], 1, 6);
        let o = Array2::from_shape_simple_fn((12, 5), || g.random_range(-1.0..1.0));
        let order: Vec<usize> = (0..12).rev().collect();
        let a = regress(o.view(), o.view(), 3, 4, &params).unwrap();
        let b = regress(o.select(Axis(0), &order).view(), o.view(), 3, 4, &params).unwrap();
        assert!((a.rot - b.rot).amax() < 1e-12);
    }

    #[test]
    fn branch_input_gradient_matches_finite_differences() {
        let mut g = ChaCha8Rng::seed_from_u64(7);
        let head = BranchHead::random(&mut g, &[4, 3, 2], 3, 5);
        let o = Array2::from_shape_simple_fn((6, 4), || g.random_range(-1.0..1.0));
        let up = [0.7, -1.1, 0.4];
        let (_, grad) = head.forward_with_grad(o.view(), 2, 3, Some(up)).unwrap();
        let grad = grad.unwrap();
        let loss = |m: &Array2<f64>| {
            let v = head.forward(m.view(), 2, 3).unwrap();
            v.iter().zip(up).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        for idx in [(0, 0), (3, 2), (5, 3), (2, 1)] {
            let mut p = o.clone();
            p[idx] += h;
            let mut m = o.clone();
            m[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let rel = (fd - grad[idx]).abs() / (fd.abs() + grad[idx].abs()).max(1e-6);
            assert!(rel < 1e-4, "{idx:?}: fd {fd} analytic {}", grad[idx]);
        }
    }
}

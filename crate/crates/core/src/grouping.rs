//! Point grouping for the point-side tokens: random downsampling, furthest
//! point sampling, kNN groups and a PointNet-style group encoder.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::error::{CalibError, Result};
use crate::par::{self, Parallelism};
use crate::projection::Point;
use crate::rng;
use crate::tensor::{silu, Dense};

/// Feature width of the point tokens.
pub const POINT_FEATURE_DIM: usize = 384;

/// Desk-scale defaults for `(downsample target, groups, group size)`.
pub const TOY_POINTS: usize = 2048;
pub const TOY_GROUPS: usize = 128;
pub const TOY_GROUP_SIZE: usize = 32;

/// Uniform random subset of `target` rows without replacement, kept in source
/// order. Clouds with at most `target` rows are returned unchanged.
pub fn downsample(points: &[Point], target: usize, seed: u64) -> Result<Vec<Point>> {
    if points.is_empty() {
        return Err(CalibError::EmptyInput("downsample needs at least one point".into()));
    }
    if points.len() <= target {
        return Ok(points.to_vec());
    }
    let mut g = rng::stream(seed, rng::streams::DOWNSAMPLE);
    let mut idx = rand::seq::index::sample(&mut g, points.len(), target).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| points[i]).collect())
}

/// Furthest point sampling starting from index 0; ties go to the lowest index.
pub fn fps(points: &[Point], count: usize) -> Result<Vec<usize>> {
    if count > points.len() {
        return Err(CalibError::TooFewPoints {
            requested: count,
            available: points.len(),
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(count);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = 0usize;
    chosen.push(current);
    taken[current] = true;
    while chosen.len() < count {
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, (p, d)) in points.iter().zip(min_d2.iter_mut()).enumerate() {
            let d2 = (p - c).norm_squared();
            if d2 < *d {
                *d = d2;
            }
            if !taken[i] && *d > best.0 {
                best = (*d, i);
            }
        }
        current = best.1;
        taken[current] = true;
        chosen.push(current);
    }
    Ok(chosen)
}

/// Centroid-anchored kNN groups over a source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGroups {
    pub centroid_indices: Vec<usize>,
    pub centroids: Vec<Point>,
    /// `members[g]` has exactly `k` indices, the centroid first.
    pub members: Vec<Vec<usize>>,
    pub k: usize,
}

impl PointGroups {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Member coordinates re-expressed relative to each group's centroid.
    pub fn local_coords(&self, points: &[Point]) -> Vec<Vec<Point>> {
        self.members
            .iter()
            .zip(&self.centroids)
            .map(|(m, c)| m.iter().map(|&i| points[i] - c).collect())
            .collect()
    }

    pub fn validate(&self, source_len: usize) -> Result<()> {
        for (g, (m, &c)) in self.members.iter().zip(&self.centroid_indices).enumerate() {
            if m.len() != self.k {
                return Err(CalibError::shape(format!("group {g} has {} members, expected {}", m.len(), self.k)));
            }
            if !m.contains(&c) {
                return Err(CalibError::shape(format!("group {g} is missing its centroid")));
            }
            if let Some(&bad) = m.iter().find(|&&i| i >= source_len) {
                return Err(CalibError::shape(format!("group {g} references point {bad} of {source_len}")));
            }
        }
        Ok(())
    }

    /// One line per group: centroid index, then member indices.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (c, m) in self.centroid_indices.iter().zip(&self.members) {
            out.push_str(&c.to_string());
            for i in m {
                out.push(' ');
                out.push_str(&i.to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub fn knn_group(points: &[Point], centroids: &[usize], k: usize) -> Result<PointGroups> {
    knn_group_with(Parallelism::default(), points, centroids, k)
}

/// Each group is its centroid followed by the `k - 1` nearest other points,
/// ordered by (distance, index).
pub fn knn_group_with(
    mode: Parallelism,
    points: &[Point],
    centroids: &[usize],
    k: usize,
) -> Result<PointGroups> {
    if k > points.len() {
        return Err(CalibError::TooFewPoints {
            requested: k,
            available: points.len(),
        });
    }
    if k == 0 {
        return Err(CalibError::InvalidArgument("group size must be at least 1".into()));
    }
    if let Some(&bad) = centroids.iter().find(|&&c| c >= points.len()) {
        return Err(CalibError::InvalidArgument(format!("centroid index {bad} out of range")));
    }
    let members = par::map_slice(mode, centroids, |&c| nearest_members(points, c, k));
    Ok(PointGroups {
        centroid_indices: centroids.to_vec(),
        centroids: centroids.iter().map(|&c| points[c]).collect(),
        members,
        k,
    })
}

fn nearest_members(points: &[Point], centroid: usize, k: usize) -> Vec<usize> {
    let c = points[centroid];
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != centroid)
        .map(|(i, p)| ((p - c).norm_squared(), i))
        .collect();
    let need = k - 1;
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if need < cand.len() && need > 0 {
        cand.select_nth_unstable_by(need - 1, by_key);
    }
    cand.truncate(need);
    cand.sort_unstable_by(by_key);
    std::iter::once(centroid).chain(cand.into_iter().map(|(_, i)| i)).collect()
}

/// Per-point shared MLP `3 -> 64 -> 128 -> D` followed by a max over the
/// group members.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
}

impl EncoderParams {
    pub const HIDDEN: [usize; 2] = [64, 128];

    pub fn random<R: Rng>(rng: &mut R, out_dim: usize) -> Self {
        let dims = [3, Self::HIDDEN[0], Self::HIDDEN[1], out_dim];
        Self {
            layers: dims.windows(2).map(|w| Dense::random(rng, w[0], w[1])).collect(),
        }
    }

    pub fn zeros(out_dim: usize) -> Self {
        let dims = [3, Self::HIDDEN[0], Self::HIDDEN[1], out_dim];
        Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or_else(|| CalibError::shape("encoder has no layers"))?;
        if first.input_dim() != 3 {
            return Err(CalibError::shape(format!("encoder input must be 3, got {}", first.input_dim())));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(CalibError::shape(format!("encoder layers {i} and {} disagree", i + 1)));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.output_dim() {
                return Err(CalibError::shape("encoder bias length mismatch"));
            }
        }
        Ok(())
    }

    /// Encodes one set of (already centered) points into a single row.
    pub fn encode_set(&self, pts: &[Point]) -> Result<ndarray::Array1<f64>> {
        self.validate()?;
        if pts.is_empty() {
            return Err(CalibError::EmptyInput("cannot encode an empty group".into()));
        }
        let mut h = Array2::from_shape_fn((pts.len(), 3), |(r, c)| pts[r][c]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h.view())?;
            if i < last {
                h.mapv_inplace(silu);
            }
        }
        Ok(h.fold_axis(Axis(0), f64::NEG_INFINITY, |&m, &v| m.max(v)))
    }
}

/// `G x D` group features in centroid order. The transformer stage of a
/// pretrained point encoder is an identity pass-through here.
pub fn encode_groups(points: &[Point], groups: &PointGroups, params: &EncoderParams) -> Result<Array2<f64>> {
    groups.validate(points.len())?;
    let local = groups.local_coords(points);
    let rows: Vec<_> = local
        .iter()
        .map(|g| params.encode_set(g))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), params.out_dim()));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&src);
    }
    Ok(out)
}

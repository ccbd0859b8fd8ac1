//! Pinhole projection, patch-plane coordinates and LiDAR-to-patch-grid
//! coordinate alignment.
//!
//! Normalized coordinates are stored as `[row_axis, col_axis]`, the same
//! order the patch grid uses: patch `(i, j)` sits at
//! `[2i/N_H - 1, 2j/N_W - 1]` and a LiDAR point projecting to pixel `(u, v)`
//! lands at `[2v/H - 1, 2u/W - 1]`. Pixel `(c, r)` covers the continuous
//! square `[c, c+1) x [r, r+1)`, so patch `(i, j)` covers pixel rows
//! `[i H_P, (i+1) H_P)` and columns `[j W_P, (j+1) W_P)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{CalibError, Result};
use crate::geometry::RigidTransform;
use crate::par::{self, Parallelism};

pub type Point = Vector3<f64>;

/// Depths at or below this are treated as degenerate; projection divides by
/// `max(w, DEPTH_EPS)` instead.
pub const DEPTH_EPS: f64 = 1e-6;

/// Default margin ratio.
pub const DEFAULT_MARGIN: f64 = 2.0;

/// Pinhole intrinsics plus the image and patch geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub patch_w: usize,
    pub patch_h: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        (width, height): (usize, usize),
        (patch_w, patch_h): (usize, usize),
    ) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            patch_w,
            patch_h,
        };
        k.validate()?;
        Ok(k)
    }

    /// A 224x448 camera with 16x16 patches (14x28 grid) and a ~90 degree
    /// horizontal field of view.
    pub fn default_camera() -> Self {
        Self {
            fx: 224.0,
            fy: 224.0,
            cx: 224.0,
            cy: 112.0,
            width: 448,
            height: 224,
            patch_w: 16,
            patch_h: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CalibError::InvalidIntrinsics(m));
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got {} / {}", self.fx, self.fy));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return bad("principal point must be finite".into());
        }
        if self.patch_w == 0 || self.patch_h == 0 {
            return bad("patch size must be non-zero".into());
        }
        if !self.width.is_multiple_of(self.patch_w) || !self.height.is_multiple_of(self.patch_h) {
            return bad(format!(
                "image {}x{} is not divisible by patch {}x{}",
                self.width, self.height, self.patch_w, self.patch_h
            ));
        }
        if self.width < self.patch_w || self.height < self.patch_h {
            return bad("image must contain at least one patch".into());
        }
        Ok(())
    }

    /// N_W.
    pub fn grid_cols(&self) -> usize {
        self.width / self.patch_w
    }

    /// N_H.
    pub fn grid_rows(&self) -> usize {
        self.height / self.patch_h
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

pub fn transform_points(points: &[Point], t: &RigidTransform) -> Vec<Point> {
    transform_points_with(Parallelism::default(), points, t)
}

pub fn transform_points_with(mode: Parallelism, points: &[Point], t: &RigidTransform) -> Vec<Point> {
    par::map_slice(mode, points, |p| t.apply(p))
}

/// Pinhole projection of one camera-frame point. Returns `([u, v], w)`; the
/// pixel uses `max(w, DEPTH_EPS)` as divisor, the depth is the raw `w`.
#[inline]
pub fn project_point(p: &Point, k: &Intrinsics) -> ([f64; 2], f64) {
    let w = p.z;
    let d = w.max(DEPTH_EPS);
    ([k.fx * p.x / d + k.cx, k.fy * p.y / d + k.cy], w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub pixels: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
}

pub fn project(points_cam: &[Point], k: &Intrinsics) -> Projection {
    let (pixels, depth) = points_cam.iter().map(|p| project_point(p, k)).unzip();
    Projection { pixels, depth }
}

/// A sequence of `[row_axis, col_axis]` normalized patch-plane coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormalizedCoords(pub Vec<[f64; 2]>);

impl NormalizedCoords {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, [f64; 2]> {
        self.0.iter()
    }

    /// Largest absolute component, 0 for an empty set.
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn permuted(&self, order: &[usize]) -> NormalizedCoords {
        NormalizedCoords(order.iter().map(|&i| self.0[i]).collect())
    }
}

impl From<Vec<[f64; 2]>> for NormalizedCoords {
    fn from(v: Vec<[f64; 2]>) -> Self {
        NormalizedCoords(v)
    }
}

/// Image feature plane coordinates, row-major over the N_H x N_W grid.
pub fn patch_grid_coords(k: &Intrinsics) -> NormalizedCoords {
    let (nh, nw) = (k.grid_rows(), k.grid_cols());
    let mut out = Vec::with_capacity(nh * nw);
    for i in 0..nh {
        for j in 0..nw {
            out.push([2.0 * i as f64 / nh as f64 - 1.0, 2.0 * j as f64 / nw as f64 - 1.0]);
        }
    }
    NormalizedCoords(out)
}

fn check_margin(margin: f64) -> Result<()> {
    if margin.is_nan() || margin < 0.0 {
        return Err(CalibError::InvalidArgument(format!(
            "margin ratio must be >= 0, got {margin}"
        )));
    }
    Ok(())
}

/// Maps a pixel to normalized `[row_axis, col_axis]` without clipping.
#[inline]
pub fn pixel_to_normalized(pixel: [f64; 2], k: &Intrinsics) -> [f64; 2] {
    let u_patch = pixel[0] / k.patch_w as f64;
    let v_patch = pixel[1] / k.patch_h as f64;
    [
        2.0 * v_patch / k.grid_rows() as f64 - 1.0,
        2.0 * u_patch / k.grid_cols() as f64 - 1.0,
    ]
}

/// Inverse of [`pixel_to_normalized`]; returns `[u, v]`.
#[inline]
pub fn normalized_to_pixel(c: [f64; 2], k: &Intrinsics) -> [f64; 2] {
    let v_patch = (c[0] + 1.0) * k.grid_rows() as f64 / 2.0;
    let u_patch = (c[1] + 1.0) * k.grid_cols() as f64 / 2.0;
    [u_patch * k.patch_w as f64, v_patch * k.patch_h as f64]
}

/// Projects LiDAR points through `t_cl` onto the patch plane and clips each
/// axis into `[-(1 + margin), 1 + margin]`. Every input point yields exactly
/// one output row. `margin = f64::INFINITY` disables clipping.
pub fn align_coords(
    points: &[Point],
    t_cl: &RigidTransform,
    k: &Intrinsics,
    margin: f64,
) -> Result<NormalizedCoords> {
    align_coords_with(Parallelism::default(), points, t_cl, k, margin)
}

pub fn align_coords_with(
    mode: Parallelism,
    points: &[Point],
    t_cl: &RigidTransform,
    k: &Intrinsics,
    margin: f64,
) -> Result<NormalizedCoords> {
    check_margin(margin)?;
    let bound = 1.0 + margin;
    let coords = par::map_slice(mode, points, |p| {
        let (pixel, _) = project_point(&t_cl.apply(p), k);
        pixel_to_normalized(pixel, k).map(|c| c.clamp(-bound, bound))
    });
    Ok(NormalizedCoords(coords))
}

/// Row-major `height x width` depth image in meters; 0 marks an empty pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn filled_pixels(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthRender {
    pub map: DepthMap,
    /// Points behind the camera or outside the image, over all points.
    pub dropout_fraction: f64,
    pub dropped: usize,
}

/// Z-buffer depth rendering of a LiDAR cloud; the nearest positive depth wins.
pub fn render_depth_map(points: &[Point], t_cl: &RigidTransform, k: &Intrinsics) -> DepthRender {
    let mut map = DepthMap::empty(k.width, k.height);
    let mut dropped = 0usize;
    for p in points {
        let (pixel, w) = project_point(&t_cl.apply(p), k);
        let (u, v) = (pixel[0], pixel[1]);
        let inside = u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64;
        if w <= DEPTH_EPS || !inside {
            dropped += 1;
            continue;
        }
        let idx = v.floor() as usize * k.width + u.floor() as usize;
        let cell = &mut map.data[idx];
        if *cell == 0.0 || w < *cell {
            *cell = w;
        }
    }
    let dropout_fraction = if points.is_empty() {
        0.0
    } else {
        dropped as f64 / points.len() as f64
    };
    DepthRender {
        map,
        dropout_fraction,
        dropped,
    }
}

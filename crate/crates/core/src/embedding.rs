//! Harmonic positional embedding and feature/coordinate token assembly.
//!
//! For a coordinate pair `(x, y)` and `n_h` harmonics the embedding row is
//!
//! ```text
//! [cos(w0 2^0 pi x), .., cos(w0 2^(n_h-1) pi x), x,
//!  sin(w0 2^0 pi y), .., sin(w0 2^(n_h-1) pi y), y]
//! ```
//!
//! with `w0 = 1 / (1 + r_p)`, so the slowest harmonic has period
//! `2 (1 + r_p)`, exactly the width of the clipped coordinate range.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{CalibError, Result};
use crate::projection::NormalizedCoords;

pub const DEFAULT_HARMONICS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicConfig {
    pub n_h: usize,
    pub margin: f64,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        Self {
            n_h: DEFAULT_HARMONICS,
            margin: crate::projection::DEFAULT_MARGIN,
        }
    }
}

impl HarmonicConfig {
    pub fn new(n_h: usize, margin: f64) -> Result<Self> {
        if margin.is_nan() || margin < 0.0 {
            return Err(CalibError::InvalidArgument(format!(
                "margin ratio must be >= 0, got {margin}"
            )));
        }
        Ok(Self { n_h, margin })
    }

    /// Base frequency `1 / (1 + r_p)`.
    pub fn omega0(&self) -> f64 {
        1.0 / (1.0 + self.margin)
    }

    /// Number of embedding channels, `2 (n_h + 1)`.
    pub fn width(&self) -> usize {
        2 * (self.n_h + 1)
    }
}

fn embed_axis(v: f64, cfg: &HarmonicConfig, trig: fn(f64) -> f64, out: &mut [f64]) {
    let base = cfg.omega0() * std::f64::consts::PI * v;
    let mut scale = 1.0;
    for slot in out.iter_mut().take(cfg.n_h) {
        *slot = trig(scale * base);
        scale *= 2.0;
    }
    out[cfg.n_h] = v;
}

pub fn harmonic_embed(coords: &NormalizedCoords, cfg: &HarmonicConfig) -> Array2<f64> {
    let half = cfg.n_h + 1;
    let mut out = Array2::zeros((coords.len(), cfg.width()));
    for (mut row, c) in out.rows_mut().into_iter().zip(coords.iter()) {
        let r = row.as_slice_mut().expect("rows of a standard layout array are contiguous");
        let (xs, ys) = r.split_at_mut(half);
        embed_axis(c[0], cfg, f64::cos, xs);
        embed_axis(c[1], cfg, f64::sin, ys);
    }
    out
}

/// Feature rows paired with their coordinates and the concatenated tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub features: Array2<f64>,
    pub coords: NormalizedCoords,
    /// `[features ; harmonic_embed(coords)]`.
    pub embedded: Array2<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.embedded.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embedded.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.embedded.ncols()
    }

    /// Token sequence built from an already embedded matrix.
    pub fn from_embedded(embedded: Array2<f64>) -> Self {
        let n = embedded.nrows();
        Self {
            features: Array2::zeros((n, 0)),
            coords: NormalizedCoords(vec![[0.0, 0.0]; n]),
            embedded,
        }
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            features: self.features.select(ndarray::Axis(0), order),
            coords: self.coords.permuted(order),
            embedded: self.embedded.select(ndarray::Axis(0), order),
        }
    }
}

pub fn assemble_tokens(
    features: ArrayView2<'_, f64>,
    coords: &NormalizedCoords,
    cfg: &HarmonicConfig,
) -> Result<TokenSequence> {
    if features.nrows() != coords.len() {
        return Err(CalibError::shape(format!(
            "{} feature rows but {} coordinates",
            features.nrows(),
            coords.len()
        )));
    }
    let d = features.ncols();
    let pos = harmonic_embed(coords, cfg);
    let mut embedded = Array2::zeros((coords.len(), d + cfg.width()));
    embedded.slice_mut(s![.., ..d]).assign(&features);
    embedded.slice_mut(s![.., d..]).assign(&pos);
    Ok(TokenSequence {
        features: features.to_owned(),
        coords: coords.clone(),
        embedded,
    })
}

//! The end-to-end calibration network with stub encoders standing in for
//! pretrained backbones.
//!
//! Image side: the camera image is cut into `patch_h x patch_w` tiles and a
//! seeded linear map lifts each tile to `feature_dim`. Point side: the cloud
//! is downsampled, grouped around farthest-point centroids and encoded by a
//! shared pointwise MLP with max pooling. Both token sets get harmonic
//! positional features on the image patch plane, with the point centroids
//! placed by projecting through the current extrinsic estimate.

use ndarray::{s, Array2, ArrayView2};

use crate::attention::{AttentionParams, BranchMode, DualAttention, DEFAULT_HEADS, DEFAULT_HEAD_DIM};
use crate::checkpoint::{self, NamedTensors, TensorVisitor, TensorVisitorMut};
use crate::embedding::{assemble_tokens, HarmonicConfig, TokenSequence, DEFAULT_HARMONICS};
use crate::error::{CalibError, Result};
use crate::geometry::{RigidTransform, Se3Tangent};
use crate::grouping::{self, encode_groups, EncoderParams, PointGroups, POINT_FEATURE_DIM};
use crate::harness::{CalibrationSample, Predictor};
use crate::projection::{align_coords, patch_grid_coords, Intrinsics, Point, DEFAULT_MARGIN};
use crate::regressor::{self, DEFAULT_CHANNELS, DEFAULT_HIDDEN};
use crate::rng;
use crate::tensor::Dense;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub n_h: usize,
    pub margin: f64,
    pub heads: usize,
    pub head_dim: usize,
    /// Residual-block channel plan; the first entry is the attention output
    /// width.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub num_points: usize,
    pub num_groups: usize,
    pub group_size: usize,
    pub mode: BranchMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: POINT_FEATURE_DIM,
            n_h: DEFAULT_HARMONICS,
            margin: DEFAULT_MARGIN,
            heads: DEFAULT_HEADS,
            head_dim: DEFAULT_HEAD_DIM,
            channels: DEFAULT_CHANNELS.to_vec(),
            kernel: 3,
            hidden: DEFAULT_HIDDEN,
            num_points: grouping::TOY_POINTS,
            num_groups: grouping::TOY_GROUPS,
            group_size: grouping::TOY_GROUP_SIZE,
            mode: BranchMode::Dual,
        }
    }
}

impl ModelConfig {
    pub fn harmonic(&self) -> Result<HarmonicConfig> {
        HarmonicConfig::new(self.n_h, self.margin)
    }

    /// Width of an assembled token: features plus positional embedding.
    pub fn token_width(&self) -> usize {
        self.feature_dim + 2 * (self.n_h + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CalibError::InvalidArgument(m.to_string()));
        if self.feature_dim == 0 || self.heads == 0 || self.head_dim == 0 || self.hidden == 0 {
            return bad("model widths must be positive");
        }
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return bad("channel plan needs at least two positive entries");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel size must be odd");
        }
        if self.num_groups == 0 || self.group_size == 0 || self.num_points < self.num_groups {
            return bad("grouping needs num_points >= num_groups > 0 and group_size > 0");
        }
        self.harmonic().map(|_| ())
    }
}

/// Linear patch embedder over a grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub patch: Dense,
}

impl ImageEncoder {
    /// `N_H * N_W x D` patch features, row-major over the patch grid.
    pub fn encode(&self, image: ArrayView2<'_, f64>, k: &Intrinsics) -> Result<Array2<f64>> {
        if image.dim() != (k.height, k.width) {
            return Err(CalibError::shape(format!(
                "image is {:?}, intrinsics expect {}x{}",
                image.dim(),
                k.height,
                k.width
            )));
        }
        let (ph, pw) = (k.patch_h, k.patch_w);
        if self.patch.input_dim() != ph * pw {
            return Err(CalibError::shape(format!(
                "patch embedder takes {} values, patches have {}",
                self.patch.input_dim(),
                ph * pw
            )));
        }
        let (nh, nw) = (k.grid_rows(), k.grid_cols());
        let mut tiles = Array2::zeros((nh * nw, ph * pw));
        for i in 0..nh {
            for j in 0..nw {
                let tile = image.slice(s![i * ph..(i + 1) * ph, j * pw..(j + 1) * pw]);
                for (dst, &v) in tiles.row_mut(i * nw + j).iter_mut().zip(tile.iter()) {
                    *dst = v;
                }
            }
        }
        self.patch.forward(tiles.view())
    }
}

/// Downsampled cloud with its groups and per-group features. Independent of
/// the extrinsic estimate, so it is computed once per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPoints {
    pub points: Vec<Point>,
    pub groups: PointGroups,
    pub features: Array2<f64>,
}

impl PreparedPoints {
    pub fn centroids(&self) -> &[Point] {
        &self.groups.centroids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibNet {
    pub config: ModelConfig,
    pub image: ImageEncoder,
    pub points: EncoderParams,
    pub attention: DualAttention,
    pub head: regressor::HeadParams,
    /// Seeds the per-sample downsampling.
    pub seed: u64,
}

impl CalibNet {
    /// Deterministic random weights for `(config, seed)`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = Intrinsics::default_camera();
        let mut img_rng = rng::stream(seed, rng::streams::IMAGE_STUB);
        let mut pt_rng = rng::stream(seed, rng::streams::POINT_STUB);
        let mut w_rng = rng::stream(seed, rng::streams::WEIGHTS);
        let d_in = config.token_width();
        let d_out = config.channels[0];
        let rot = AttentionParams::random(&mut w_rng, d_in, config.heads, config.head_dim, d_out);
        let tsl = AttentionParams::random(&mut w_rng, d_in, config.heads, config.head_dim, d_out);
        let head = regressor::HeadParams::random(&mut w_rng, &config.channels, config.kernel, config.hidden);
        Ok(Self {
            image: ImageEncoder {
                patch: Dense::random(&mut img_rng, k.patch_h * k.patch_w, config.feature_dim),
            },
            points: EncoderParams::random(&mut pt_rng, config.feature_dim),
            attention: DualAttention { rot, tsl, mode: config.mode },
            head,
            config,
            seed,
        })
    }

    pub fn prepare_points(&self, cloud: &[Point]) -> Result<PreparedPoints> {
        let cfg = &self.config;
        let points = grouping::downsample(cloud, cfg.num_points, self.seed)?;
        let centroids = grouping::fps(&points, cfg.num_groups.min(points.len()))?;
        let groups = grouping::knn_group(&points, &centroids, cfg.group_size.min(points.len()))?;
        let features = encode_groups(&points, &groups, &self.points)?;
        Ok(PreparedPoints { points, groups, features })
    }

    pub fn image_tokens(&self, image: ArrayView2<'_, f64>, k: &Intrinsics) -> Result<TokenSequence> {
        let features = self.image.encode(image, k)?;
        assemble_tokens(features.view(), &patch_grid_coords(k), &self.config.harmonic()?)
    }

    /// Point tokens positioned by projecting the centroids through `t_cl`.
    pub fn point_tokens(&self, prepared: &PreparedPoints, t_cl: &RigidTransform, k: &Intrinsics) -> Result<TokenSequence> {
        let coords = align_coords(prepared.centroids(), t_cl, k, self.config.margin)?;
        assemble_tokens(prepared.features.view(), &coords, &self.config.harmonic()?)
    }

    /// Attention plus regression on assembled tokens laid out on a
    /// `rows x cols` image grid.
    pub fn forward_tokens(&self, x: &TokenSequence, y: &TokenSequence, rows: usize, cols: usize) -> Result<Se3Tangent> {
        let (o_rot, o_tsl) = self.attention.forward(x, y)?;
        regressor::regress(o_rot.output.view(), o_tsl.output.view(), rows, cols, &self.head)
    }

    pub fn forward(
        &self,
        image: ArrayView2<'_, f64>,
        prepared: &PreparedPoints,
        t_cl: &RigidTransform,
        k: &Intrinsics,
    ) -> Result<Se3Tangent> {
        let x = self.image_tokens(image, k)?;
        let y = self.point_tokens(prepared, t_cl, k)?;
        self.forward_tokens(&x, &y, k.grid_rows(), k.grid_cols())
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<()> {
        checkpoint::save(self, stem)
    }

    /// Loads weights saved from a network with the same configuration.
    pub fn load(config: ModelConfig, seed: u64, stem: &std::path::Path) -> Result<Self> {
        let mut net = Self::random(config, seed)?;
        checkpoint::load_into(&mut net, stem)?;
        Ok(net)
    }
}

impl Predictor for CalibNet {
    fn predict(&self, sample: &CalibrationSample, current: &RigidTransform) -> Result<Se3Tangent> {
        let prepared = self.prepare_points(&sample.points)?;
        self.forward(sample.image.view(), &prepared, current, &sample.intrinsics)
    }
}

fn visit_dense(d: &Dense, prefix: &str, f: &mut TensorVisitor<'_>) {
    f(&format!("{prefix}.weight"), &[d.input_dim(), d.output_dim()], d.weight.as_slice().unwrap());
    f(&format!("{prefix}.bias"), &[d.output_dim()], d.bias.as_slice().unwrap());
}

fn visit_dense_mut(d: &mut Dense, prefix: &str, f: &mut TensorVisitorMut<'_>) {
    let dims = [d.input_dim(), d.output_dim()];
    f(&format!("{prefix}.weight"), &dims, d.weight.as_slice_mut().unwrap());
    f(&format!("{prefix}.bias"), &dims[1..], d.bias.as_slice_mut().unwrap());
}

impl NamedTensors for CalibNet {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        visit_dense(&self.image.patch, "image.patch", f);
        for (i, l) in self.points.layers.iter().enumerate() {
            visit_dense(l, &format!("points.layer{i}"), f);
        }
        checkpoint::visit_prefixed(&self.attention.rot, "attn_rot", f);
        checkpoint::visit_prefixed(&self.attention.tsl, "attn_tsl", f);
        checkpoint::visit_prefixed(&self.head, "head", f);
    }

    fn visit_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        visit_dense_mut(&mut self.image.patch, "image.patch", f);
        for (i, l) in self.points.layers.iter_mut().enumerate() {
            visit_dense_mut(l, &format!("points.layer{i}"), f);
        }
        checkpoint::visit_prefixed_mut(&mut self.attention.rot, "attn_rot", f);
        checkpoint::visit_prefixed_mut(&mut self.attention.tsl, "attn_tsl", f);
        checkpoint::visit_prefixed_mut(&mut self.head, "head", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{synth_scene, SceneConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            n_h: 2,
            heads: 2,
            head_dim: 4,
            channels: vec![8, 6, 4],
            hidden: 5,
            num_points: 256,
            num_groups: 16,
            group_size: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_widths() {
        let c = ModelConfig::default();
        assert_eq!(c.token_width(), 384 + 14);
        assert_eq!(c.channels, vec![384, 192, 96]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn image_encoder_tile_order() {
        let k = Intrinsics::default_camera();
        let mut patch = Dense::zeros(k.patch_h * k.patch_w, 1);
        patch.weight.fill(1.0);
        let enc = ImageEncoder { patch };
        let mut img = Array2::zeros((k.height, k.width));
        img[(16 * 3 + 5, 16 * 7 + 2)] = 2.0;
        let f = enc.encode(img.view(), &k).unwrap();
        assert_eq!(f.dim(), (392, 1));
        assert_eq!(f[(3 * 28 + 7, 0)], 2.0);
        assert_eq!(f.sum(), 2.0);
        assert!(enc.encode(Array2::zeros((10, 10)).view(), &k).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let scene = SceneConfig { num_points: 600, ..SceneConfig::default() };
        let s = synth_scene(&scene, 1).unwrap();
        let a = CalibNet::random(tiny(), 3).unwrap();
        let b = CalibNet::random(tiny(), 3).unwrap();
        let xa = a.predict(&s, &s.t_init).unwrap();
        assert!(xa.is_finite());
        assert_eq!(xa, b.predict(&s, &s.t_init).unwrap());
        let other = CalibNet::random(tiny(), 4).unwrap().predict(&s, &s.t_init).unwrap();
        assert_ne!(xa, other);
    }

    #[test]
    fn prediction_depends_on_extrinsic() {
        let s = synth_scene(&SceneConfig { num_points: 600, ..SceneConfig::default() }, 2).unwrap();
        let net = CalibNet::random(tiny(), 1).unwrap();
        let prepared = net.prepare_points(&s.points).unwrap();
        assert_eq!(prepared.features.dim(), (16, 8));
        let a = net.forward(s.image.view(), &prepared, &s.t_init, &s.intrinsics).unwrap();
        let b = net.forward(s.image.view(), &prepared, &s.t_gt, &s.intrinsics).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        let net = CalibNet::random(tiny(), 11).unwrap();
        net.save(&stem).unwrap();
        let loaded = CalibNet::load(tiny(), 0, &stem).unwrap();
        assert_eq!(loaded.attention, net.attention);
        assert_eq!(loaded.head, net.head);
        assert_eq!(loaded.image, net.image);
        assert!(CalibNet::load(ModelConfig { hidden: 7, ..tiny() }, 0, &stem).is_err());
    }
}

//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and out-of-range
//! values are rejected with the offending key. `RunConfig::render` writes the
//! fully resolved configuration back in the same format, one key per line in
//! a fixed order, so it can be fed back in verbatim.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use calib_core::attention::BranchMode;
use calib_core::gradcheck::AttentionDims;
use calib_core::harness::{automotive_extrinsic, SceneConfig, SceneKind};
use calib_core::model::ModelConfig;
use calib_core::{CalibError, Intrinsics, PerturbRange, Result, RigidTransform};

pub const OUT_DIR_ENV: &str = "XCAL_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    Perfect,
    Contraction,
    Zero,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneChoice {
    Street,
    Frontal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneChoice,
    pub scene_points: usize,
    pub plane_distance: f64,
    pub plane_coverage: f64,
    /// Use the identity as ground truth instead of the automotive mounting.
    pub identity_gt: bool,
    pub rot_deg: f64,
    pub tsl_cm: f64,
    pub margin: f64,
    pub n_h: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    pub num_points: usize,
    pub num_groups: usize,
    pub group_size: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub branch: BranchMode,
    pub predictor: PredictorKind,
    pub contraction: f64,
    pub steps: usize,
    pub samples: usize,
    pub n_q: usize,
    pub n_kv: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let k = Intrinsics::default_camera();
        let m = ModelConfig::default();
        let g = AttentionDims::SMALL;
        Self {
            seed: 0,
            scene: SceneChoice::Street,
            scene_points: 4096,
            plane_distance: 10.0,
            plane_coverage: 0.98,
            identity_gt: false,
            rot_deg: 10.0,
            tsl_cm: 50.0,
            margin: m.margin,
            n_h: m.n_h,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            patch_w: k.patch_w,
            patch_h: k.patch_h,
            num_points: m.num_points,
            num_groups: m.num_groups,
            group_size: m.group_size,
            feature_dim: m.feature_dim,
            heads: m.heads,
            head_dim: m.head_dim,
            hidden: m.hidden,
            branch: BranchMode::Dual,
            predictor: PredictorKind::Contraction,
            contraction: 0.5,
            steps: 3,
            samples: 200,
            n_q: g.n_q,
            n_kv: g.n_kv,
            d_in: g.d_in,
            d_out: g.d_out,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> CalibError {
    CalibError::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn positive(key: &str, v: &str) -> Result<usize> {
    match num::<usize>(key, v)? {
        0 => Err(bad(key, "must be >= 1")),
        n => Ok(n),
    }
}

fn finite(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() {
        return Err(bad(key, "must be finite"));
    }
    Ok(x)
}

fn non_negative(key: &str, v: &str) -> Result<f64> {
    let x = finite(key, v)?;
    if x < 0.0 {
        return Err(bad(key, "must be >= 0"));
    }
    Ok(x)
}

fn fmt_f(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x}")
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 36] = [
        "seed",
        "scene",
        "scene_points",
        "plane_distance",
        "plane_coverage",
        "identity_gt",
        "rot_deg",
        "tsl_cm",
        "margin",
        "n_h",
        "fx",
        "fy",
        "cx",
        "cy",
        "width",
        "height",
        "patch_w",
        "patch_h",
        "num_points",
        "num_groups",
        "group_size",
        "feature_dim",
        "heads",
        "head_dim",
        "hidden",
        "branch",
        "predictor",
        "contraction",
        "steps",
        "samples",
        "n_q",
        "n_kv",
        "d_in",
        "d_out",
        "out_dir",
        // written by `render`; ignored on input
        "command",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "scene" => {
                self.scene = match v {
                    "street" => SceneChoice::Street,
                    "frontal" => SceneChoice::Frontal,
                    _ => return Err(bad(key, "expected `street` or `frontal`")),
                }
            }
            "scene_points" => self.scene_points = positive(key, v)?,
            "plane_distance" => {
                self.plane_distance = finite(key, v)?;
                if self.plane_distance <= 0.0 {
                    return Err(bad(key, "must be > 0"));
                }
            }
            "plane_coverage" => {
                self.plane_coverage = finite(key, v)?;
                if !(self.plane_coverage > 0.0 && self.plane_coverage <= 1.0) {
                    return Err(bad(key, "must be in (0, 1]"));
                }
            }
            "identity_gt" => self.identity_gt = num(key, v)?,
            "rot_deg" => self.rot_deg = non_negative(key, v)?,
            "tsl_cm" => self.tsl_cm = non_negative(key, v)?,
            "margin" => {
                let m: f64 = num(key, v)?;
                if m.is_nan() || m < 0.0 {
                    return Err(bad(key, "must be >= 0 (or inf)"));
                }
                self.margin = m;
            }
            "n_h" => self.n_h = num(key, v)?,
            "fx" => self.fx = finite(key, v)?,
            "fy" => self.fy = finite(key, v)?,
            "cx" => self.cx = finite(key, v)?,
            "cy" => self.cy = finite(key, v)?,
            "width" => self.width = positive(key, v)?,
            "height" => self.height = positive(key, v)?,
            "patch_w" => self.patch_w = positive(key, v)?,
            "patch_h" => self.patch_h = positive(key, v)?,
            "num_points" => self.num_points = positive(key, v)?,
            "num_groups" => self.num_groups = positive(key, v)?,
            "group_size" => self.group_size = positive(key, v)?,
            "feature_dim" => self.feature_dim = positive(key, v)?,
            "heads" => self.heads = positive(key, v)?,
            "head_dim" => self.head_dim = positive(key, v)?,
            "hidden" => self.hidden = positive(key, v)?,
            "branch" => {
                self.branch = match v {
                    "dual" => BranchMode::Dual,
                    "shared" => BranchMode::Shared,
                    _ => return Err(bad(key, "expected `dual` or `shared`")),
                }
            }
            "predictor" => {
                self.predictor = match v {
                    "perfect" => PredictorKind::Perfect,
                    "contraction" => PredictorKind::Contraction,
                    "zero" => PredictorKind::Zero,
                    "network" => PredictorKind::Network,
                    _ => return Err(bad(key, "expected perfect, contraction, zero or network")),
                }
            }
            "contraction" => self.contraction = finite(key, v)?,
            "steps" => self.steps = positive(key, v)?,
            "samples" => self.samples = positive(key, v)?,
            "n_q" => self.n_q = positive(key, v)?,
            "n_kv" => self.n_kv = positive(key, v)?,
            "d_in" => self.d_in = positive(key, v)?,
            "d_out" => self.d_out = positive(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "command" => {}
            _ => return Err(bad(key, format!("unknown key; known keys: {}", Self::KEYS.join(", ")))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CalibError::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    /// The output directory, with the environment override applied.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.out_dir.clone(),
        }
    }

    pub fn render(&self, command: &str) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("command", command.to_string());
        kv("seed", self.seed.to_string());
        kv("scene", match self.scene {
            SceneChoice::Street => "street",
            SceneChoice::Frontal => "frontal",
        }
        .into());
        kv("scene_points", self.scene_points.to_string());
        kv("plane_distance", fmt_f(self.plane_distance));
        kv("plane_coverage", fmt_f(self.plane_coverage));
        kv("identity_gt", self.identity_gt.to_string());
        kv("rot_deg", fmt_f(self.rot_deg));
        kv("tsl_cm", fmt_f(self.tsl_cm));
        kv("margin", fmt_f(self.margin));
        kv("n_h", self.n_h.to_string());
        kv("fx", fmt_f(self.fx));
        kv("fy", fmt_f(self.fy));
        kv("cx", fmt_f(self.cx));
        kv("cy", fmt_f(self.cy));
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("patch_w", self.patch_w.to_string());
        kv("patch_h", self.patch_h.to_string());
        kv("num_points", self.num_points.to_string());
        kv("num_groups", self.num_groups.to_string());
        kv("group_size", self.group_size.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("heads", self.heads.to_string());
        kv("head_dim", self.head_dim.to_string());
        kv("hidden", self.hidden.to_string());
        kv("branch", match self.branch {
            BranchMode::Dual => "dual",
            BranchMode::Shared => "shared",
        }
        .into());
        kv("predictor", match self.predictor {
            PredictorKind::Perfect => "perfect",
            PredictorKind::Contraction => "contraction",
            PredictorKind::Zero => "zero",
            PredictorKind::Network => "network",
        }
        .into());
        kv("contraction", fmt_f(self.contraction));
        kv("steps", self.steps.to_string());
        kv("samples", self.samples.to_string());
        kv("n_q", self.n_q.to_string());
        kv("n_kv", self.n_kv.to_string());
        kv("d_in", self.d_in.to_string());
        kv("d_out", self.d_out.to_string());
        kv("out_dir", self.resolved_out_dir().display().to_string());
        s
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            (self.width, self.height),
            (self.patch_w, self.patch_h),
        )
    }

    pub fn range(&self) -> Result<PerturbRange> {
        PerturbRange::new(self.rot_deg, self.tsl_cm)
    }

    pub fn t_gt(&self) -> RigidTransform {
        if self.identity_gt {
            RigidTransform::identity()
        } else {
            automotive_extrinsic()
        }
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        Ok(SceneConfig {
            kind: match self.scene {
                SceneChoice::Street => SceneKind::Street,
                SceneChoice::Frontal => SceneKind::FrontalPlane {
                    distance: self.plane_distance,
                    coverage: self.plane_coverage,
                },
            },
            num_points: self.scene_points,
            intrinsics: self.intrinsics()?,
            t_gt: self.t_gt(),
            perturbation: self.range()?,
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            n_h: self.n_h,
            margin: self.margin,
            heads: self.heads,
            head_dim: self.head_dim,
            hidden: self.hidden,
            num_points: self.num_points,
            num_groups: self.num_groups,
            group_size: self.group_size,
            mode: self.branch,
            ..ModelConfig::default()
        }
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            n_q: self.n_q,
            n_kv: self.n_kv,
            heads: self.heads,
            head_dim: self.head_dim,
            d_in: self.d_in,
            d_out: self.d_out,
        }
    }
}

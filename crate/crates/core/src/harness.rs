//! Evaluation harness: calibration samples, predictors, iterative
//! refinement, error metrics and success rates.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::error::{CalibError, Result};
use crate::geometry::{self, exp_se3, log_se3, PerturbRange, RigidTransform, Se3Tangent};
use crate::par::{self, Parallelism};
use crate::projection::{render_depth_map, Intrinsics, Point};
use crate::rng;

pub const L1_ROT_DEG: f64 = 1.0;
pub const L1_TSL_CM: f64 = 2.5;
pub const L2_ROT_DEG: f64 = 2.0;
pub const L2_TSL_CM: f64 = 5.0;
pub const DEFAULT_STEPS: usize = 3;

/// One calibration problem. `image` is the grayscale camera view the image
/// encoder consumes (`height x width`).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub points: Vec<Point>,
    pub intrinsics: Intrinsics,
    pub t_gt: RigidTransform,
    pub t_init: RigidTransform,
    pub image: Array2<f64>,
}

impl CalibrationSample {
    /// Builds a sample whose image is synthesized from the cloud seen through
    /// the true extrinsics.
    pub fn new(points: Vec<Point>, intrinsics: Intrinsics, t_gt: RigidTransform, t_init: RigidTransform) -> Result<Self> {
        t_gt.validate()?;
        t_init.validate()?;
        intrinsics.validate()?;
        let image = synthetic_image(&points, &t_gt, &intrinsics);
        Ok(Self {
            points,
            intrinsics,
            t_gt,
            t_init,
            image,
        })
    }

    /// Remaining correction `T_gt * current^-1`.
    pub fn remaining(&self, current: &RigidTransform) -> RigidTransform {
        self.t_gt.compose(&current.inverse())
    }
}

/// Inverse-depth rendering of the cloud, 0 where no point lands.
pub fn synthetic_image(points: &[Point], t_cl: &RigidTransform, k: &Intrinsics) -> Array2<f64> {
    let dm = render_depth_map(points, t_cl, k).map;
    Array2::from_shape_fn((k.height, k.width), |(r, c)| {
        let d = dm.get(r, c);
        if d > 0.0 {
            1.0 / d
        } else {
            0.0
        }
    })
}

/// Regresses the se(3) update for a sample at the current extrinsic estimate.
pub trait Predictor: Sync {
    fn predict(&self, sample: &CalibrationSample, current: &RigidTransform) -> Result<Se3Tangent>;
}

/// Always predicts no update.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn predict(&self, _: &CalibrationSample, _: &RigidTransform) -> Result<Se3Tangent> {
        Ok(Se3Tangent::zero())
    }
}

/// Returns `factor * log(T_gt current^-1)`: 1.0 is a perfect oracle, 0.5
/// halves the remaining twist each step.
#[derive(Debug, Clone, Copy)]
pub struct ContractionOracle {
    pub factor: f64,
}

impl ContractionOracle {
    pub fn perfect() -> Self {
        Self { factor: 1.0 }
    }
}

impl Predictor for ContractionOracle {
    fn predict(&self, sample: &CalibrationSample, current: &RigidTransform) -> Result<Se3Tangent> {
        Ok(log_se3(&sample.remaining(current))?.scale(self.factor))
    }
}

impl<F> Predictor for F
where
    F: Fn(&CalibrationSample, &RigidTransform) -> Result<Se3Tangent> + Sync,
{
    fn predict(&self, sample: &CalibrationSample, current: &RigidTransform) -> Result<Se3Tangent> {
        self(sample, current)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub transform: RigidTransform,
    /// `T^(0) ..= T^(steps)`.
    pub trace: Vec<RigidTransform>,
    /// The update `xi^(k)` applied at each step.
    pub updates: Vec<Se3Tangent>,
}

/// `T^(k+1) = exp(predictor(T^(k))) * T^(k)`, starting from `sample.t_init`.
pub fn refine<P: Predictor + ?Sized>(sample: &CalibrationSample, predictor: &P, steps: usize) -> Result<Refinement> {
    if steps == 0 {
        return Err(CalibError::InvalidArgument("refinement needs at least one step".into()));
    }
    let mut current = sample.t_init;
    let mut trace = vec![current];
    let mut updates = Vec::with_capacity(steps);
    for _ in 0..steps {
        let xi = predictor.predict(sample, &current)?;
        if !xi.is_finite() {
            return Err(CalibError::InvalidArgument("predictor returned a non-finite update".into()));
        }
        current = exp_se3(&xi).compose(&current);
        trace.push(current);
        updates.push(xi);
    }
    Ok(Refinement {
        transform: current,
        trace,
        updates,
    })
}

/// `T_pred * T_gt^-1`.
pub fn error_transform(t_pred: &RigidTransform, t_gt: &RigidTransform) -> RigidTransform {
    t_pred.compose(&t_gt.inverse())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleMetrics {
    /// Roll, pitch, yaw of the error transform, degrees.
    pub rot_err_deg: [f64; 3],
    /// X, Y, Z of the error translation, centimeters.
    pub tsl_err_cm: [f64; 3],
    pub rot_rmse: f64,
    pub rot_mae: f64,
    pub tsl_rmse: f64,
    pub tsl_mae: f64,
    pub l1_pass: bool,
    pub l2_pass: bool,
}

fn rmse(v: &[f64; 3]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / 3.0).sqrt()
}

fn mae(v: &[f64; 3]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / 3.0
}

pub fn sample_metrics(t_pred: &RigidTransform, t_gt: &RigidTransform) -> Result<SampleMetrics> {
    let err = error_transform(t_pred, t_gt);
    let rot_err_deg = geometry::euler_zyx(&err)?.to_array().map(f64::to_degrees);
    let tsl_err_cm = [err.translation.x, err.translation.y, err.translation.z].map(|m| m * 100.0);
    let (rot_rmse, tsl_rmse) = (rmse(&rot_err_deg), rmse(&tsl_err_cm));
    Ok(SampleMetrics {
        rot_err_deg,
        tsl_err_cm,
        rot_rmse,
        rot_mae: mae(&rot_err_deg),
        tsl_rmse,
        tsl_mae: mae(&tsl_err_cm),
        l1_pass: rot_rmse < L1_ROT_DEG && tsl_rmse < L1_TSL_CM,
        l2_pass: rot_rmse < L2_ROT_DEG && tsl_rmse < L2_TSL_CM,
    })
}

/// Mean and (population) standard deviation over samples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleOutcome {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<SampleMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub n_failed: usize,
    pub rot_rmse_mean: f64,
    pub rot_rmse_std: f64,
    pub rot_mae_mean: f64,
    pub rot_mae_std: f64,
    pub tsl_rmse_mean: f64,
    pub tsl_rmse_std: f64,
    pub tsl_mae_mean: f64,
    pub tsl_mae_std: f64,
    /// Percent of successfully evaluated samples passing the L1 thresholds.
    pub l1_rate: f64,
    pub l2_rate: f64,
    pub samples: Vec<SampleOutcome>,
}

impl MetricsReport {
    /// Aggregates per-sample results; failures are counted but excluded from
    /// every statistic.
    pub fn aggregate(results: Vec<Result<SampleMetrics>>) -> Self {
        let samples: Vec<SampleOutcome> = results
            .into_iter()
            .enumerate()
            .map(|(index, r)| match r {
                Ok(m) => SampleOutcome { index, metrics: Some(m), error: None },
                Err(e) => SampleOutcome { index, metrics: None, error: Some(e.to_string()) },
            })
            .collect();
        let ok: Vec<&SampleMetrics> = samples.iter().filter_map(|s| s.metrics.as_ref()).collect();
        let stat = |f: fn(&SampleMetrics) -> f64| MeanStd::of(ok.iter().map(|m| f(m)));
        let rate = |f: fn(&SampleMetrics) -> bool| {
            if ok.is_empty() {
                0.0
            } else {
                100.0 * ok.iter().filter(|m| f(m)).count() as f64 / ok.len() as f64
            }
        };
        let (rr, ra, tr, ta) = (stat(|m| m.rot_rmse), stat(|m| m.rot_mae), stat(|m| m.tsl_rmse), stat(|m| m.tsl_mae));
        Self {
            n_samples: samples.len(),
            n_failed: samples.len() - ok.len(),
            rot_rmse_mean: rr.mean,
            rot_rmse_std: rr.std,
            rot_mae_mean: ra.mean,
            rot_mae_std: ra.std,
            tsl_rmse_mean: tr.mean,
            tsl_rmse_std: tr.std,
            tsl_mae_mean: ta.mean,
            tsl_mae_std: ta.std,
            l1_rate: rate(|m| m.l1_pass),
            l2_rate: rate(|m| m.l2_pass),
            samples,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean per-step errors across samples, for plotting convergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub rot_err_deg: f64,
    pub tsl_err_cm: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,rot_err_deg,tsl_err_cm\n");
    for r in rows {
        out.push_str(&format!("{},{:.9},{:.9}\n", r.step, r.rot_err_deg, r.tsl_err_cm));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub trace: Vec<TraceRow>,
    pub refinements: Vec<Option<Refinement>>,
}

pub fn evaluate<P: Predictor + ?Sized>(samples: &[CalibrationSample], predictor: &P, steps: usize) -> Result<Evaluation> {
    evaluate_with(Parallelism::default(), samples, predictor, steps)
}

/// Refines every sample independently and aggregates the final metrics.
pub fn evaluate_with<P: Predictor + ?Sized>(
    mode: Parallelism,
    samples: &[CalibrationSample],
    predictor: &P,
    steps: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(CalibError::EmptyInput("evaluation needs at least one sample".into()));
    }
    if steps == 0 {
        return Err(CalibError::InvalidArgument("refinement needs at least one step".into()));
    }
    let runs = par::map_slice(mode, samples, |s| {
        let r = refine(s, predictor, steps)?;
        let per_step = r
            .trace
            .iter()
            .map(|t| sample_metrics(t, &s.t_gt))
            .collect::<Result<Vec<_>>>()?;
        Ok((r, per_step))
    });
    let mut finals = Vec::with_capacity(runs.len());
    let mut refinements = Vec::with_capacity(runs.len());
    let mut sums = vec![(0.0, 0.0, 0usize); steps + 1];
    for run in runs {
        match run {
            Ok((r, per_step)) => {
                for (acc, m) in sums.iter_mut().zip(&per_step) {
                    acc.0 += m.rot_rmse;
                    acc.1 += m.tsl_rmse;
                    acc.2 += 1;
                }
                finals.push(Ok(*per_step.last().expect("steps >= 1")));
                refinements.push(Some(r));
            }
            Err(e) => {
                finals.push(Err(e));
                refinements.push(None);
            }
        }
    }
    let trace = sums
        .iter()
        .enumerate()
        .map(|(step, &(r, t, n))| {
            let n = n.max(1) as f64;
            TraceRow {
                step,
                rot_err_deg: r / n,
                tsl_err_cm: t / n,
            }
        })
        .collect();
    Ok(Evaluation {
        report: MetricsReport::aggregate(finals),
        trace,
        refinements,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SceneKind {
    /// A camera-facing plane at `distance` meters covering `coverage` of the
    /// field of view along each axis.
    FrontalPlane { distance: f64, coverage: f64 },
    /// Ground plane, back wall and a few boxes.
    Street,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub num_points: usize,
    pub intrinsics: Intrinsics,
    pub t_gt: RigidTransform,
    pub perturbation: PerturbRange,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Street,
            num_points: 4096,
            intrinsics: Intrinsics::default_camera(),
            t_gt: automotive_extrinsic(),
            perturbation: PerturbRange::DEG10_CM50,
        }
    }
}

/// LiDAR (x forward, y left, z up) to camera (x right, y down, z forward),
/// with the LiDAR mounted 27 cm above and 8 cm behind the camera.
pub fn automotive_extrinsic() -> RigidTransform {
    RigidTransform {
        rotation: Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
        translation: Vector3::new(0.0, -0.27, -0.08),
    }
}

/// Camera-frame points of the scene.
fn scene_points_camera<R: Rng>(kind: SceneKind, n: usize, k: &Intrinsics, rng: &mut R) -> Vec<Point> {
    match kind {
        SceneKind::FrontalPlane { distance, coverage } => {
            let half_u = coverage * k.width as f64 / 2.0;
            let half_v = coverage * k.height as f64 / 2.0;
            let (cu, cv) = (k.width as f64 / 2.0, k.height as f64 / 2.0);
            (0..n)
                .map(|_| {
                    let u = cu + rng.random_range(-half_u..half_u);
                    let v = cv + rng.random_range(-half_v..half_v);
                    Point::new((u - k.cx) / k.fx * distance, (v - k.cy) / k.fy * distance, distance)
                })
                .collect()
        }
        SceneKind::Street => {
            // camera y points down; the ground sits 1.6 m below the camera
            let boxes = [
                (Point::new(-3.0, 0.4, 9.0), Point::new(1.6, 1.2, 1.6)),
                (Point::new(2.5, 0.6, 14.0), Point::new(2.0, 1.0, 4.0)),
                (Point::new(-1.0, 0.1, 22.0), Point::new(3.0, 1.5, 1.0)),
            ];
            (0..n)
                .map(|i| match i % 4 {
                    0 => Point::new(rng.random_range(-12.0..12.0), 1.6, rng.random_range(2.0..40.0)),
                    1 => Point::new(rng.random_range(-20.0..20.0), rng.random_range(-6.0..1.6), 40.0),
                    _ => {
                        let (c, half) = boxes[rng.random_range(0..boxes.len())];
                        let face = rng.random_range(0..3usize);
                        let mut p = Point::new(
                            rng.random_range(-half.x..half.x),
                            rng.random_range(-half.y..half.y),
                            rng.random_range(-half.z..half.z),
                        );
                        // front face, side face, top face
                        match face {
                            0 => p.z = -half.z,
                            1 => p.x = if p.x < 0.0 { -half.x } else { half.x },
                            _ => p.y = -half.y,
                        }
                        c + p
                    }
                })
                .collect()
        }
    }
}

/// Deterministic synthetic calibration sample:
/// `T_init = sample_perturbation(range) * T_gt`.
pub fn synth_scene(cfg: &SceneConfig, seed: u64) -> Result<CalibrationSample> {
    let mut g = rng::stream(seed, rng::streams::SCENE);
    let cam = scene_points_camera(cfg.kind, cfg.num_points, &cfg.intrinsics, &mut g);
    let to_lidar = cfg.t_gt.inverse();
    let points = cam.iter().map(|p| to_lidar.apply(p)).collect();
    let t_r = geometry::sample_perturbation(&cfg.perturbation, seed);
    CalibrationSample::new(points, cfg.intrinsics, cfg.t_gt, t_r.compose(&cfg.t_gt))
}

/// `count` samples with per-sample seeds derived from `seed`.
pub fn synth_suite(cfg: &SceneConfig, seed: u64, count: usize) -> Result<Vec<CalibrationSample>> {
    (0..count)
        .map(|i| synth_scene(cfg, rng::child_seed(seed, i as u64)))
        .collect()
}

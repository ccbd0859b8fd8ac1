use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use calib_core::embedding::harmonic_embed;
use calib_core::error::{CalibError, Result};
use calib_core::geometry::{draw_perturbation, log_se3};
use calib_core::gradcheck::{self, EndToEndDims};
use calib_core::grouping::{self, knn_group};
use calib_core::harness::{self, ContractionOracle, Predictor, ZeroPredictor};
use calib_core::io;
use calib_core::model::CalibNet;
use calib_core::projection::{self, align_coords, patch_grid_coords, render_depth_map, transform_points, NormalizedCoords};
use calib_core::rng;

use crate::config::{PredictorKind, RunConfig};

/// What a command produced: files written and a one-line summary. `ok = false`
/// maps to the validation-failure exit code.
pub struct Outcome {
    pub summary: String,
    pub ok: bool,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Self { summary, ok: true }
    }
}

pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig, command: &str) -> Result<Self> {
        let out = cfg.resolved_out_dir();
        fs::create_dir_all(&out).map_err(|e| CalibError::Io { path: out.clone(), source: e })?;
        let run = Self { cfg, out };
        run.write("resolved.cfg", &run.cfg.render(command))?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| CalibError::Io { path: p, source: e })
    }
}

fn format_coords(c: &NormalizedCoords) -> String {
    let mut s = String::with_capacity(c.len() * 24);
    for [a, b] in c.iter() {
        writeln!(s, "{a:.9} {b:.9}").expect("string write");
    }
    s
}

fn format_matrix(m: &ndarray::Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}

pub fn perturb(run: &Run, gt_file: &Path) -> Result<Outcome> {
    let t_gt = io::read_transform(gt_file)?;
    let range = run.cfg.range()?;
    let mut g = rng::stream(run.cfg.seed, rng::streams::PERTURBATION);
    let draw = draw_perturbation(&range, &mut g);
    let t_r = draw.to_transform();
    let t_init = t_r.compose(&t_gt);
    io::write_transform(&run.path("t_init.txt"), &t_init)?;
    io::write_transform(&run.path("t_r.txt"), &t_r)?;
    Ok(Outcome::ok(format!(
        "perturbation euler_deg={:?} tsl_cm={:?}",
        draw.euler_deg, draw.tsl_cm
    )))
}

pub fn project(run: &Run, cloud: &Path, transform: &Path) -> Result<Outcome> {
    let points = io::read_points(cloud)?;
    let t = io::read_transform(transform)?;
    let k = run.cfg.intrinsics()?;
    let coords = align_coords(&points, &t, &k, run.cfg.margin)?;
    let proj = projection::project(&transform_points(&points, &t), &k);
    let mut px = String::new();
    for ([u, v], w) in proj.pixels.iter().zip(&proj.depth) {
        writeln!(px, "{u:.9} {v:.9} {w:.9}").expect("string write");
    }
    run.write("coords.txt", &format_coords(&coords))?;
    run.write("pixels.txt", &px)?;
    Ok(Outcome::ok(format!("{} points aligned, max |coord| {:.6}", coords.len(), coords.max_abs())))
}

pub fn render_depth(run: &Run, cloud: &Path, transform: &Path) -> Result<Outcome> {
    let points = io::read_points(cloud)?;
    if points.is_empty() {
        return Err(CalibError::EmptyInput("point cloud has no points".into()));
    }
    let t = io::read_transform(transform)?;
    let k = run.cfg.intrinsics()?;
    let r = render_depth_map(&points, &t, &k);
    io::write_depth_map(&run.path("depth.p2f"), &r.map)?;
    let report = json!({
        "points": points.len(),
        "dropped": r.dropped,
        "dropout_fraction": r.dropout_fraction,
        "filled_pixels": r.map.filled_pixels(),
    });
    run.write("dropout.json", &pretty(&report))?;
    Ok(Outcome::ok(format!("dropout_fraction {:.6}", r.dropout_fraction)))
}

pub fn group(run: &Run, cloud: &Path) -> Result<Outcome> {
    let points = io::read_points(cloud)?;
    let sampled = grouping::downsample(&points, run.cfg.num_points, run.cfg.seed)?;
    let centroids = grouping::fps(&sampled, run.cfg.num_groups)?;
    let groups = knn_group(&sampled, &centroids, run.cfg.group_size)?;
    run.write("sampled.txt", &io::format_points_text(&sampled))?;
    run.write("groups.txt", &groups.dump())?;
    run.write("centroids.txt", &io::format_points_text(&groups.centroids))?;
    Ok(Outcome::ok(format!("{} groups of {} from {} points", groups.len(), groups.k, sampled.len())))
}

pub fn embed(run: &Run, cloud: Option<&Path>, transform: Option<&Path>) -> Result<Outcome> {
    let k = run.cfg.intrinsics()?;
    let h = run.cfg.model().harmonic()?;
    let coords = match (cloud, transform) {
        (Some(c), Some(t)) => align_coords(&io::read_points(c)?, &io::read_transform(t)?, &k, run.cfg.margin)?,
        (None, None) => patch_grid_coords(&k),
        _ => return Err(CalibError::InvalidArgument("--cloud and --transform go together".into())),
    };
    let e = harmonic_embed(&coords, &h);
    run.write("embedding.txt", &format_matrix(&e))?;
    Ok(Outcome::ok(format!("{} x {} embedding, omega0 {}", e.nrows(), e.ncols(), h.omega0())))
}

pub fn attend(run: &Run) -> Result<Outcome> {
    let sample = harness::synth_scene(&run.cfg.scene()?, run.cfg.seed)?;
    let net = CalibNet::random(run.cfg.model(), run.cfg.seed)?;
    let k = &sample.intrinsics;
    let prepared = net.prepare_points(&sample.points)?;
    let x = net.image_tokens(sample.image.view(), k)?;
    let y = net.point_tokens(&prepared, &sample.t_init, k)?;
    let (rot, tsl) = net.attention.forward(&x, &y)?;
    for (name, o) in [("rot", &rot), ("tsl", &tsl)] {
        for (i, w) in o.attn_weights.iter().enumerate() {
            run.write(&format!("attn_{name}_head{i}.txt"), &format_matrix(w))?;
        }
    }
    let xi = net.forward_tokens(&x, &y, k.grid_rows(), k.grid_cols())?;
    run.write("xi.txt", &format!("{}\n", xi.to_array().map(|v| format!("{v:.12}")).join(" ")))?;
    Ok(Outcome::ok(format!(
        "{} image tokens x {} point tokens, width {}, xi finite: {}",
        x.len(),
        y.len(),
        x.width(),
        xi.is_finite()
    )))
}

pub fn gradcheck(run: &Run, corrupt: bool, end_to_end: bool) -> Result<Outcome> {
    let attn = gradcheck::attention_gradcheck(run.cfg.seed, run.cfg.attention_dims(), corrupt)?;
    let mut reports = vec![("attention", attn)];
    if end_to_end {
        reports.push(("end_to_end", gradcheck::end_to_end_gradcheck(run.cfg.seed, &EndToEndDims::default())?));
    }
    let ok = reports.iter().all(|(_, r)| r.passed);
    let body: serde_json::Map<_, _> = reports
        .iter()
        .map(|(n, r)| ((*n).to_string(), serde_json::to_value(r).expect("json")))
        .collect();
    run.write("gradcheck.json", &pretty(&serde_json::Value::Object(body)))?;
    let worst = reports
        .iter()
        .map(|(_, r)| r.max_rel_err)
        .fold(0.0f64, f64::max);
    Ok(Outcome {
        summary: format!("{} max relative error {worst:.3e}", if ok { "PASS" } else { "FAIL" }),
        ok,
    })
}

fn predictor(cfg: &RunConfig) -> Result<Box<dyn Predictor>> {
    Ok(match cfg.predictor {
        PredictorKind::Perfect => Box::new(ContractionOracle::perfect()),
        PredictorKind::Contraction => Box::new(ContractionOracle { factor: cfg.contraction }),
        PredictorKind::Zero => Box::new(ZeroPredictor),
        PredictorKind::Network => Box::new(CalibNet::random(cfg.model(), cfg.seed)?),
    })
}

pub fn evaluate(run: &Run) -> Result<Outcome> {
    let samples = harness::synth_suite(&run.cfg.scene()?, run.cfg.seed, run.cfg.samples)?;
    let p = predictor(&run.cfg)?;
    let ev = harness::evaluate(&samples, p.as_ref(), run.cfg.steps)?;
    run.write("report.json", &(ev.report.to_json() + "\n"))?;
    run.write("trace.csv", &harness::trace_csv(&ev.trace))?;
    let r = &ev.report;
    Ok(Outcome::ok(format!(
        "rot_rmse {:.4}±{:.4} deg, tsl_rmse {:.4}±{:.4} cm, L1 {:.1}%, L2 {:.1}%, failed {}",
        r.rot_rmse_mean, r.rot_rmse_std, r.tsl_rmse_mean, r.tsl_rmse_std, r.l1_rate, r.l2_rate, r.n_failed
    )))
}

/// One synthetic sample end to end: scene files, depth maps at truth and at
/// the perturbed estimate, and a short refinement.
pub fn demo(run: &Run) -> Result<Outcome> {
    let cfg = &run.cfg;
    let sample = harness::synth_scene(&cfg.scene()?, cfg.seed)?;
    let k = &sample.intrinsics;
    io::write_points(&run.path("cloud.txt"), &sample.points)?;
    io::write_transform(&run.path("t_gt.txt"), &sample.t_gt)?;
    io::write_transform(&run.path("t_init.txt"), &sample.t_init)?;
    let at_gt = render_depth_map(&sample.points, &sample.t_gt, k);
    let at_init = render_depth_map(&sample.points, &sample.t_init, k);
    io::write_depth_map(&run.path("depth_gt.p2f"), &at_gt.map)?;
    io::write_depth_map(&run.path("depth_init.p2f"), &at_init.map)?;
    let tokens_gt = align_coords(&sample.points, &sample.t_gt, k, cfg.margin)?.len();
    let tokens_init = align_coords(&sample.points, &sample.t_init, k, cfg.margin)?.len();

    let p = predictor(cfg)?;
    let refined = harness::refine(&sample, p.as_ref(), cfg.steps)?;
    let mut trace = String::from("step,rot_err_deg,tsl_err_cm\n");
    for (i, t) in refined.trace.iter().enumerate() {
        let m = harness::sample_metrics(t, &sample.t_gt)?;
        writeln!(trace, "{i},{:.9},{:.9}", m.rot_rmse, m.tsl_rmse).expect("string write");
    }
    run.write("trace.csv", &trace)?;
    let final_m = harness::sample_metrics(&refined.transform, &sample.t_gt)?;
    let init_twist = log_se3(&harness::error_transform(&sample.t_init, &sample.t_gt))?;
    let summary = json!({
        "points": sample.points.len(),
        "dropout_at_gt": at_gt.dropout_fraction,
        "dropout_at_init": at_init.dropout_fraction,
        "aligned_tokens_at_gt": tokens_gt,
        "aligned_tokens_at_init": tokens_init,
        "initial_error_twist": init_twist.to_array(),
        "final": final_m,
    });
    run.write("demo.json", &pretty(&summary))?;
    Ok(Outcome::ok(format!(
        "dropout gt {:.4} init {:.4}; tokens {tokens_gt}/{tokens_init}; final rot {:.4} deg tsl {:.4} cm",
        at_gt.dropout_fraction, at_init.dropout_fraction, final_m.rot_rmse, final_m.tsl_rmse
    )))
}

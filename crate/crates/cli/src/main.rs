//! `xcal`: command-line access to every stage of the calibration pipeline.
//!
//! Exit status: 0 on success, 1 on a validation failure (bad config value,
//! failed gradient check, geometric precondition), 2 on I/O or parse errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use calib_core::CalibError;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "xcal", version, about = "Camera-LiDAR extrinsic calibration toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (the XCAL_OUT_DIR environment variable wins).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Perturb a ground-truth extrinsic; writes t_init.txt and t_r.txt.
    Perturb {
        #[arg(long)]
        gt: PathBuf,
    },
    /// Align a cloud onto the patch plane; writes coords.txt and pixels.txt.
    Project {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        transform: PathBuf,
    },
    /// Z-buffer depth map and dropout report.
    RenderDepth {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        transform: PathBuf,
    },
    /// Downsample, FPS and kNN grouping.
    Group {
        #[arg(long)]
        cloud: PathBuf,
    },
    /// Harmonic embedding of the patch grid, or of an aligned cloud.
    Embed {
        #[arg(long, requires = "transform")]
        cloud: Option<PathBuf>,
        #[arg(long, requires = "cloud")]
        transform: Option<PathBuf>,
    },
    /// Run the seeded network's cross-attention on a synthetic sample.
    Attend,
    /// Finite-difference check of the attention gradients.
    Gradcheck {
        /// Corrupt one analytic entry (negative control).
        #[arg(long)]
        corrupt: bool,
        /// Also check through the regression heads.
        #[arg(long)]
        end_to_end: bool,
    },
    /// Iterative refinement over a synthetic suite; writes report.json and trace.csv.
    Evaluate,
    /// One synthetic sample end to end.
    Demo,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Perturb { .. } => "perturb",
            Command::Project { .. } => "project",
            Command::RenderDepth { .. } => "render-depth",
            Command::Group { .. } => "group",
            Command::Embed { .. } => "embed",
            Command::Attend => "attend",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Evaluate => "evaluate",
            Command::Demo => "demo",
        }
    }
}

fn resolve(common: &Common) -> calib_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CalibError::Config {
            key: kv.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> calib_core::Result<commands::Outcome> {
    let cfg = resolve(&cli.common)?;
    let run = commands::Run::new(cfg, cli.command.name())?;
    match &cli.command {
        Command::Perturb { gt } => commands::perturb(&run, gt),
        Command::Project { cloud, transform } => commands::project(&run, cloud, transform),
        Command::RenderDepth { cloud, transform } => commands::render_depth(&run, cloud, transform),
        Command::Group { cloud } => commands::group(&run, cloud),
        Command::Embed { cloud, transform } => commands::embed(&run, cloud.as_deref(), transform.as_deref()),
        Command::Attend => commands::attend(&run),
        Command::Gradcheck { corrupt, end_to_end } => commands::gradcheck(&run, *corrupt, *end_to_end),
        Command::Evaluate => commands::evaluate(&run),
        Command::Demo => commands::demo(&run),
    }
}

fn exit_code(e: &CalibError) -> u8 {
    match e {
        CalibError::Io { .. } | CalibError::Parse { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(o) => {
            println!("{}", o.summary);
            if o.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

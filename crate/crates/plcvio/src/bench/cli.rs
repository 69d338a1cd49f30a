//! Command-line interface: `simulate`, `metrics`, and `export-tracks`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 filter divergence (any
//! robot's position RMSE above 10 m), 4 consistency violation in strict
//! mode (mean pose NEES outside the 95% envelope for dimension 6).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::bench::campaign::{base_spline, CampaignConfig, TrajectorySource};
use crate::bench::{emit_reports, emit_trajectories, metrics, run_campaign, VariantName};
use crate::coop::WeightMode;
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::meas::{tracks_to_jsonl, CameraModel};
use crate::sim::{generate_run, parse_tum, Regime, RobotOffset, SimConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_INCONSISTENT: i32 = 4;

/// Divergence threshold on any robot's position RMSE (meters).
pub const DIVERGENCE_RMSE_M: f64 = 10.0;
/// 95% envelope for the mean pose NEES at dimension 6.
pub const NEES_ENVELOPE: (f64, f64) = (4.7, 7.4);

#[derive(Parser)]
#[command(name = "plcvio", version, about = "Cooperative point-line visual-inertial odometry benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run a Monte-Carlo campaign and write CSV/JSON reports.
    Simulate(SimulateArgs),
    /// Recompute metrics from stored estimate/truth trajectory files.
    Metrics(MetricsArgs),
    /// Dump the synthesized measurement stream in the JSON-Lines track format.
    ExportTracks(ExportArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML configuration file; omitted fields fall back to defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for reports.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of Monte-Carlo runs override.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Feature regime override: rich or low.
    #[arg(long)]
    pub regime: Option<String>,
    /// Variant to run (repeatable); defaults to all five.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Also write per-run TUM trajectories.
    #[arg(long)]
    pub write_trajectories: bool,
    /// Fail with exit code 4 if the mean pose NEES leaves the 95% envelope.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args)]
pub struct MetricsArgs {
    /// Estimated trajectory (TUM format).
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth trajectory (TUM format).
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory; metrics are printed when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated segment lengths in meters for ROE/RPE.
    #[arg(long, default_value = "8,16,24,32,40,48")]
    pub segments: String,
}

#[derive(Args)]
pub struct ExportArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output JSONL path.
    #[arg(long, default_value = "tracks.jsonl")]
    pub out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature regime override.
    #[arg(long)]
    pub regime: Option<String>,
}

/// TOML file schema; every field is optional and overlays the defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    duration: Option<f64>,
    num_robots: Option<usize>,
    imu_rate: Option<f64>,
    cam_rate: Option<f64>,
    regime: Option<Regime>,
    max_points_per_frame: Option<usize>,
    max_lines_per_frame: Option<usize>,
    pixel_sigma: Option<f64>,
    runs: Option<usize>,
    seed: Option<u64>,
    trajectory: Option<String>,
    variants: Option<Vec<String>>,
    perturb_init: Option<bool>,
    t_d: Option<f64>,
    offsets: Option<Vec<RobotOffset>>,
    noise: Option<NoiseFields>,
    camera: Option<CameraFields>,
    filter: Option<FilterFields>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseFields {
    sigma_g: Option<f64>,
    sigma_a: Option<f64>,
    sigma_wg: Option<f64>,
    sigma_wa: Option<f64>,
    gravity: Option<[f64; 3]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFields {
    f_u: Option<f64>,
    f_v: Option<f64>,
    c_u: Option<f64>,
    c_v: Option<f64>,
    width: Option<u32>,
    height: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterFields {
    max_clones: Option<usize>,
    fej: Option<bool>,
    estimate_calib: Option<bool>,
    weight_mode: Option<String>,
    naive_fusion: Option<bool>,
}

/// Loads the campaign configuration from an optional TOML file plus CLI
/// overrides.
pub fn load_config(
    path: Option<&PathBuf>,
    seed: Option<u64>,
    runs: Option<usize>,
    regime: Option<&str>,
    variants: &[String],
) -> Result<CampaignConfig> {
    let file: FileConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };

    let mut sim = SimConfig::default();
    if let Some(v) = file.duration {
        sim.duration = v;
    }
    if let Some(v) = file.num_robots {
        sim.num_robots = v;
    }
    if let Some(v) = file.imu_rate {
        sim.imu_rate = v;
    }
    if let Some(v) = file.cam_rate {
        sim.cam_rate = v;
    }
    if let Some(v) = file.regime {
        sim.regime = v;
    }
    sim.max_points_per_frame = file.max_points_per_frame.or(sim.max_points_per_frame);
    sim.max_lines_per_frame = file.max_lines_per_frame.or(sim.max_lines_per_frame);
    if let Some(v) = file.pixel_sigma {
        sim.pixel_sigma = v;
    }
    if let Some(v) = file.runs {
        sim.mc_runs = v;
    }
    if let Some(v) = file.seed {
        sim.seed = v;
    }
    if let Some(v) = file.perturb_init {
        sim.perturb_init = v;
    }
    if let Some(v) = file.t_d {
        sim.t_d = v;
    }
    if let Some(v) = file.offsets {
        sim.offsets = v;
    }
    if let Some(n) = file.noise {
        if let Some(v) = n.sigma_g {
            sim.noise.sigma_g = v;
        }
        if let Some(v) = n.sigma_a {
            sim.noise.sigma_a = v;
        }
        if let Some(v) = n.sigma_wg {
            sim.noise.sigma_wg = v;
        }
        if let Some(v) = n.sigma_wa {
            sim.noise.sigma_wa = v;
        }
        if let Some(g) = n.gravity {
            sim.noise.gravity = nalgebra::Vector3::new(g[0], g[1], g[2]);
        }
    }
    // CLI overrides
    if let Some(v) = seed {
        sim.seed = v;
    }
    if let Some(v) = runs {
        sim.mc_runs = v;
    }
    if let Some(r) = regime {
        sim.regime = r.parse()?;
    }
    // extend the offset list for large robot counts
    while sim.offsets.len() < sim.num_robots {
        let k = sim.offsets.len() as f64;
        sim.offsets.push(RobotOffset { position: [0.3 * k, 0.3 * k, 0.0], yaw_deg: 3.0 * k });
    }

    let mut cam = CameraModel { sigma_px: sim.pixel_sigma, ..CameraModel::default() };
    if let Some(c) = file.camera {
        if let Some(v) = c.f_u {
            cam.f_u = v;
        }
        if let Some(v) = c.f_v {
            cam.f_v = v;
        }
        if let Some(v) = c.c_u {
            cam.c_u = v;
        }
        if let Some(v) = c.c_v {
            cam.c_v = v;
        }
        if let Some(v) = c.width {
            cam.width = v;
        }
        if let Some(v) = c.height {
            cam.height = v;
        }
    }

    let mut filter = FilterConfig { noise: sim.noise.clone(), ..FilterConfig::default() };
    if let Some(ff) = file.filter {
        if let Some(v) = ff.max_clones {
            filter.max_clones = v;
        }
        if let Some(v) = ff.fej {
            filter.fej = v;
        }
        if let Some(v) = ff.estimate_calib {
            filter.estimate_calib = v;
        }
        if let Some(v) = ff.weight_mode {
            filter.weight_mode = match v.as_str() {
                "equal" => WeightMode::Equal,
                "trace-min" | "trace_min" => WeightMode::TraceMin,
                other => return Err(Error::Config(format!("unknown weight_mode '{other}'"))),
            };
        }
        if let Some(v) = ff.naive_fusion {
            filter.naive_fusion = v;
        }
    }

    let trajectory = match file.trajectory.as_deref() {
        None | Some("figure8") | Some("figure-eight") => TrajectorySource::FigureEight,
        Some(path) => TrajectorySource::TumFile(PathBuf::from(path)),
    };

    let mut names: Vec<VariantName> = Vec::new();
    let requested: Vec<String> = if !variants.is_empty() {
        variants.to_vec()
    } else {
        file.variants.unwrap_or_default()
    };
    for v in &requested {
        let name: VariantName = v.parse()?;
        if !names.contains(&name) {
            names.push(name);
        }
    }
    if names.is_empty() {
        names = VariantName::ALL.to_vec();
    }

    Ok(CampaignConfig {
        sim,
        filter,
        cam,
        calib: crate::sim::default_calib(),
        variants: names,
        trajectory,
    })
}

fn simulate(args: &SimulateArgs) -> Result<i32> {
    let cfg = load_config(
        args.config.as_ref(),
        args.seed,
        args.runs,
        args.regime.as_deref(),
        &args.variants,
    )?;
    let reports = run_campaign(&cfg)?;
    let files = emit_reports(&reports, &args.out)?;
    if args.write_trajectories {
        emit_trajectories(&reports, &args.out)?;
    }
    for f in &files {
        println!("wrote {}", f.display());
    }

    let mut code = EXIT_OK;
    for r in &reports {
        for robot in &r.robots {
            if robot.rmse_m > DIVERGENCE_RMSE_M {
                eprintln!(
                    "divergence: {} run {} robot {} rmse {:.3} m",
                    r.variant, r.run, robot.robot_id, robot.rmse_m
                );
                code = EXIT_DIVERGED;
            }
        }
    }
    if code == EXIT_OK && args.strict {
        for (variant, nees) in crate::bench::campaign::mean_nees_by_variant(&reports) {
            if nees < NEES_ENVELOPE.0 || nees > NEES_ENVELOPE.1 {
                eprintln!("consistency violation: {variant} mean NEES {nees:.3} outside [{}, {}]", NEES_ENVELOPE.0, NEES_ENVELOPE.1);
                code = EXIT_INCONSISTENT;
            }
        }
    }
    Ok(code)
}

fn metrics_cmd(args: &MetricsArgs) -> Result<i32> {
    let est_poses = parse_tum(&std::fs::read_to_string(&args.est)?)?;
    let gt_poses = parse_tum(&std::fs::read_to_string(&args.gt)?)?;
    // associate by nearest timestamp
    let mut est = Vec::new();
    let mut gt = Vec::new();
    for e in &est_poses {
        let nearest = gt_poses
            .iter()
            .min_by(|a, b| (a.t - e.t).abs().partial_cmp(&(b.t - e.t).abs()).unwrap())
            .unwrap();
        if (nearest.t - e.t).abs() < 0.05 {
            est.push((e.t, crate::geom::UnitQuaternion::from_rotation(&e.r_itog.transpose()), e.p));
            gt.push((nearest.t, crate::geom::UnitQuaternion::from_rotation(&nearest.r_itog.transpose()), nearest.p));
        }
    }
    if est.is_empty() {
        return Err(Error::LengthMismatch(est_poses.len(), gt_poses.len()));
    }
    let lengths: Vec<f64> = args
        .segments
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("segments: {e}"))))
        .collect::<Result<_>>()?;
    let (rmse_deg, rmse_m) = metrics::rmse(&est, &gt)?;
    let rpe = metrics::relative_errors(&est, &gt, &lengths)?;

    println!("matched poses: {}", est.len());
    println!("rmse_deg: {rmse_deg:.6}");
    println!("rmse_m: {rmse_m:.6}");
    for seg in &rpe {
        println!(
            "segment {:.0} m: roe {:.6} deg, rpe {:.6} m ({} samples)",
            seg.length, seg.mean_roe_deg, seg.mean_rpe_m, seg.count
        );
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        #[derive(serde::Serialize)]
        struct Doc {
            matched: usize,
            rmse_deg: f64,
            rmse_m: f64,
            segments: Vec<metrics::SegmentError>,
        }
        let doc = Doc { matched: est.len(), rmse_deg, rmse_m, segments: rpe };
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&doc)?)?;
        println!("wrote {}", dir.join("metrics.json").display());
    }
    Ok(EXIT_OK)
}

fn export_tracks(args: &ExportArgs) -> Result<i32> {
    let cfg = load_config(args.config.as_ref(), args.seed, Some(1), args.regime.as_deref(), &[])?;
    let base = base_spline(&cfg)?;
    let data = generate_run(&cfg.sim, &base, &cfg.cam, &cfg.calib, 0)?;
    let mut text = String::new();
    for frame in &data.frames {
        for rf in &frame.robots {
            text.push_str(&tracks_to_jsonl(&rf.points, &rf.lines)?);
        }
    }
    std::fs::write(&args.out, &text)?;
    println!(
        "wrote {} ({} frames, stream hash {:016x})",
        args.out.display(),
        data.frames.len(),
        data.stream_hash
    );
    Ok(EXIT_OK)
}

/// Entry point shared by the binary and the tests. Returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.cmd {
        Command::Simulate(args) => simulate(args),
        Command::Metrics(args) => metrics_cmd(args),
        Command::ExportTracks(args) => export_tracks(args),
    };
    match result {
        Ok(code) => code,
        Err(e @ (Error::Config(_) | Error::Io(_) | Error::Serde(_))) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

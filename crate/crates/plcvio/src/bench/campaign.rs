//! Monte-Carlo campaign driver.
//!
//! One campaign runs `mc_runs` independent worlds; within a run every
//! pipeline variant consumes the identical measurement stream (the stream
//! hash is recorded per report so paired comparisons can assert it), so
//! per-variant differences are attributable to the pipeline alone. Runs
//! execute in parallel; reports come back in deterministic `(run, variant)`
//! order.

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;

use crate::bench::metrics::{self, PoseSeries, SegmentError};
use crate::bench::VariantName;
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, RobotFilter, UpdateCounters};
use crate::meas::CameraModel;
use crate::sim::{
    default_calib, figure_eight_controls, generate_run, parse_tum, resample_uniform, rng_stream,
    SimConfig, SimData, TrajectorySpline,
};
use crate::state::{CalibState, ImuState};

/// Where the ground-truth trajectory comes from.
#[derive(Debug, Clone)]
pub enum TrajectorySource {
    FigureEight,
    TumFile(std::path::PathBuf),
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub sim: SimConfig,
    pub filter: FilterConfig,
    pub cam: CameraModel,
    pub calib: CalibState,
    pub variants: Vec<VariantName>,
    pub trajectory: TrajectorySource,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            filter: FilterConfig::default(),
            cam: CameraModel::default(),
            calib: default_calib(),
            variants: VariantName::ALL.to_vec(),
            trajectory: TrajectorySource::FigureEight,
        }
    }
}

/// Per-robot results of one run of one variant.
#[derive(Debug, Clone)]
pub struct RobotReport {
    pub robot_id: usize,
    pub rmse_deg: f64,
    pub rmse_m: f64,
    pub mean_nees: f64,
    pub bytes_per_frame: f64,
    pub final_pos_err_m: f64,
    pub counters: UpdateCounters,
    pub rpe: Vec<SegmentError>,
    pub nees_series: Vec<f64>,
    pub est_series: PoseSeries,
    pub gt_series: PoseSeries,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub variant: String,
    pub run: usize,
    pub stream_hash: u64,
    pub robots: Vec<RobotReport>,
}

/// Builds the base spline for the configured trajectory source.
pub fn base_spline(cfg: &CampaignConfig) -> Result<TrajectorySpline> {
    match &cfg.trajectory {
        TrajectorySource::FigureEight => {
            TrajectorySpline::new(&figure_eight_controls(cfg.sim.duration + 4.0, 5.0))
        }
        TrajectorySource::TumFile(path) => {
            let text = std::fs::read_to_string(path)?;
            let poses = parse_tum(&text)?;
            let uniform = resample_uniform(&poses, 5.0)?;
            TrajectorySpline::new(&uniform)
        }
    }
}

/// Runs one variant over one pre-generated measurement stream.
pub fn run_variant(
    cfg: &CampaignConfig,
    data: &SimData,
    variant: VariantName,
    run: usize,
) -> Result<RunReport> {
    let sim = &cfg.sim;
    let flags = variant.flags();
    let mut filters: Vec<RobotFilter> = (0..sim.num_robots)
        .map(|i| {
            let truth = &data.frames[0].robots[i].truth;
            let imu = ImuState {
                q_gtoi: truth.q_gtoi,
                p_iing: truth.p,
                v_iing: truth.v,
                bg: Vector3::zeros(),
                ba: Vector3::zeros(),
            };
            let mut f = RobotFilter::new(
                i,
                imu,
                cfg.calib.clone(),
                sim.t_d,
                cfg.cam.clone(),
                cfg.filter.clone(),
                flags,
            );
            if sim.perturb_init {
                // draw the initial error from the initial covariance so the
                // estimation error is statistically consistent from frame one
                let mut rng = rng_stream(sim.seed, run as u64, i as u64, 1_000_000);
                let stds = cfg.filter.init_std.diagonal();
                let dx = DVector::from_fn(stds.len(), |k, _| {
                    stds[k].sqrt() * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)
                });
                f.state.apply_correction(&dx).expect("init perturbation");
            }
            f
        })
        .collect();

    let n_frames = data.frames.len();
    let mut est: Vec<PoseSeries> = vec![Vec::with_capacity(n_frames); sim.num_robots];
    let mut gt: Vec<PoseSeries> = vec![Vec::with_capacity(n_frames); sim.num_robots];
    let mut nees: Vec<Vec<f64>> = vec![Vec::with_capacity(n_frames); sim.num_robots];

    for frame in &data.frames {
        let mut all_msgs = Vec::new();
        for (i, f) in filters.iter_mut().enumerate() {
            let rf = &frame.robots[i];
            let msgs = f.process_frame(frame.t + sim.t_d, &data.imu[i], &rf.points, &rf.lines)?;
            all_msgs.extend(msgs);
        }
        for (i, f) in filters.iter_mut().enumerate() {
            f.absorb_messages(&all_msgs)?;
            let truth = &frame.robots[i].truth;
            est[i].push((frame.t, f.state.imu.q_gtoi, f.state.imu.p_iing));
            gt[i].push((frame.t, truth.q_gtoi, truth.p));
            nees[i].push(pose_nees(f, truth.q_gtoi, truth.p));
        }
    }

    let mut robots = Vec::with_capacity(sim.num_robots);
    for (i, f) in filters.iter().enumerate() {
        let (rmse_deg, rmse_m) = metrics::rmse(&est[i], &gt[i])?;
        let rpe = metrics::relative_errors(&est[i], &gt[i], &metrics::default_segment_lengths())?;
        let final_pos_err_m = est[i]
            .last()
            .zip(gt[i].last())
            .map(|(e, g)| (e.2 - g.2).norm())
            .unwrap_or(0.0);
        robots.push(RobotReport {
            robot_id: i,
            rmse_deg,
            rmse_m,
            mean_nees: metrics::mean_finite(&nees[i]),
            bytes_per_frame: if f.counters.frames > 0 {
                f.counters.bytes_sent as f64 / f.counters.frames as f64
            } else {
                0.0
            },
            final_pos_err_m,
            counters: f.counters,
            rpe,
            nees_series: nees[i].clone(),
            est_series: est[i].clone(),
            gt_series: gt[i].clone(),
        });
    }
    Ok(RunReport { variant: variant.label().to_string(), run, stream_hash: data.stream_hash, robots })
}

/// Normalized estimation error squared of the current pose (dim 6).
fn pose_nees(f: &RobotFilter, q_true: crate::geom::UnitQuaternion, p_true: Vector3<f64>) -> f64 {
    let dq = q_true.boxminus(&f.state.imu.q_gtoi);
    let dp = p_true - f.state.imu.p_iing;
    let e = DVector::from_vec(vec![dq.x, dq.y, dq.z, dp.x, dp.y, dp.z]);
    let mut p6 = f.state.cov.view((0, 0), (6, 6)).clone_owned();
    for i in 0..6 {
        p6[(i, i)] += 1e-12;
    }
    match p6.cholesky() {
        Some(ch) => e.dot(&ch.solve(&e)),
        None => f64::NAN,
    }
}

/// Runs the full campaign: all `(run, variant)` pairs, parallel over runs.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<Vec<RunReport>> {
    cfg.sim.validate()?;
    if cfg.variants.is_empty() {
        return Err(Error::Config("no variants selected".into()));
    }
    let base = base_spline(cfg)?;
    let runs: Vec<usize> = (0..cfg.sim.mc_runs).collect();
    let nested: Vec<Result<Vec<RunReport>>> = runs
        .par_iter()
        .map(|&run| {
            let data = generate_run(&cfg.sim, &base, &cfg.cam, &cfg.calib, run as u64)?;
            let mut out = Vec::with_capacity(cfg.variants.len());
            for &v in &cfg.variants {
                out.push(run_variant(cfg, &data, v, run)?);
            }
            Ok(out)
        })
        .collect();
    let mut reports = Vec::new();
    for chunk in nested {
        reports.extend(chunk?);
    }
    // paired-seed discipline: identical streams across variants of one run
    for run in &runs {
        let hashes: Vec<u64> = reports
            .iter()
            .filter(|r| r.run == *run)
            .map(|r| r.stream_hash)
            .collect();
        if hashes.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Config(format!("stream hash mismatch in run {run}")));
        }
    }
    Ok(reports)
}

/// Mean position RMSE per variant across runs and robots.
pub fn mean_rmse_by_variant(reports: &[RunReport]) -> std::collections::BTreeMap<String, f64> {
    let mut sums: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for r in reports {
        for robot in &r.robots {
            let e = sums.entry(r.variant.clone()).or_default();
            e.0 += robot.rmse_m;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Mean pose NEES per variant across runs and robots.
pub fn mean_nees_by_variant(reports: &[RunReport]) -> std::collections::BTreeMap<String, f64> {
    let mut sums: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for r in reports {
        for robot in &r.robots {
            if robot.mean_nees.is_finite() {
                let e = sums.entry(r.variant.clone()).or_default();
                e.0 += robot.mean_nees;
                e.1 += 1;
            }
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

//! Per-robot filter orchestration: one camera frame at a time.
//!
//! A frame is processed in two phases so robots can exchange common-feature
//! blocks synchronously:
//!
//! 1. [`RobotFilter::process_frame`] propagates with the IMU, clones the
//!    pose, ingests this frame's tracks, triangulates and projects the
//!    features whose tracks ended (or filled the window), applies the
//!    independent update from the feature-free blocks, and returns the
//!    feature-dependent top blocks as messages for whichever feature kinds
//!    the active variant shares.
//! 2. [`RobotFilter::absorb_messages`] fuses the retained top blocks with
//!    the neighbors' via the covariance-intersection update, then slides the
//!    window.
//!
//! A robot only uses messages for features it also linearized this frame, so
//! both sides of every stacked block refer to the same feature at the same
//! instant.

use std::collections::{BTreeMap, HashMap};

use crate::coop::{
    ci_update, merge_projected, project_common, select_weights, stack_common, CommonFeatureMessage,
    WeightMode,
};
use crate::error::{Error, Result};
use crate::meas::{
    triangulate_line, triangulate_point, CamPose, CameraModel, FeatureEstimate, LineObservation,
    PointObservation, TriangulationConfig, TriangulatedFeature,
};
use crate::msckf::{
    chi2_gate, ekf_update, nullspace_project, stack_line_feature, stack_point_feature,
    LinearizationOptions, TopBlock,
};
use crate::propagate::{propagate_state, select_span, ImuSample, NoiseConfig};
use crate::state::{CalibState, ImuState, RobotState, StateLayout};

/// Which feature streams a pipeline variant consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlgorithmVariant {
    pub use_lines_independent: bool,
    pub use_common_points: bool,
    pub use_common_lines: bool,
}

impl AlgorithmVariant {
    /// Points only, no cooperation.
    pub fn p_vio() -> Self {
        Self { use_lines_independent: false, use_common_points: false, use_common_lines: false }
    }
    /// Points and lines, no cooperation.
    pub fn pl_vio() -> Self {
        Self { use_lines_independent: true, use_common_points: false, use_common_lines: false }
    }
    /// Points only, common points shared.
    pub fn p_cvio() -> Self {
        Self { use_lines_independent: false, use_common_points: true, use_common_lines: false }
    }
    /// Independent points and lines, common points shared.
    pub fn ipl_cp_cvio() -> Self {
        Self { use_lines_independent: true, use_common_points: true, use_common_lines: false }
    }
    /// Independent and common points and lines.
    pub fn pl_cvio() -> Self {
        Self { use_lines_independent: true, use_common_points: true, use_common_lines: true }
    }
}

/// Filter tuning knobs.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub max_clones: usize,
    /// Evaluate clone Jacobians at first estimates.
    pub fej: bool,
    /// Online camera-IMU extrinsic calibration.
    pub estimate_calib: bool,
    /// Reserved: the time-offset slot is carried in the state but its
    /// measurement Jacobian is zero, so estimation stays off.
    pub estimate_td: bool,
    pub noise: NoiseConfig,
    pub triangulation: TriangulationConfig,
    pub weight_mode: WeightMode,
    /// Consistency foil: ignore the CI weights (double-counts shared
    /// information). Benchmarks only.
    pub naive_fusion: bool,
    /// A line is shared only when its top-block feature Jacobian has
    /// smallest singular value at least this many sigmas: weak line blocks
    /// dilute the frame's common update.
    pub min_share_strength: f64,
    pub time_tol: f64,
    /// Initial error-state standard deviations for the 22 base dimensions.
    pub init_std: InitStd,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_clones: 11,
            fej: false,
            estimate_calib: true,
            estimate_td: false,
            noise: NoiseConfig::default(),
            triangulation: TriangulationConfig::default(),
            weight_mode: WeightMode::TraceMin,
            naive_fusion: false,
            min_share_strength: 10.0,
            time_tol: 1e-6,
            init_std: InitStd::default(),
        }
    }
}

/// Initial standard deviations of the base error state.
#[derive(Debug, Clone)]
pub struct InitStd {
    pub theta: f64,
    pub pos: f64,
    pub vel: f64,
    pub bg: f64,
    pub ba: f64,
    pub calib_theta: f64,
    pub calib_pos: f64,
    pub td: f64,
}

impl Default for InitStd {
    fn default() -> Self {
        Self {
            theta: 0.5_f64.to_radians(),
            pos: 0.02,
            vel: 0.05,
            bg: 2e-3,
            ba: 2e-2,
            calib_theta: 0.2_f64.to_radians(),
            calib_pos: 5e-3,
            td: 0.0,
        }
    }
}

impl InitStd {
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(22);
        for &(std, n) in &[
            (self.theta, 3),
            (self.pos, 3),
            (self.vel, 3),
            (self.bg, 3),
            (self.ba, 3),
            (self.calib_theta, 3),
            (self.calib_pos, 3),
            (self.td, 1),
        ] {
            for _ in 0..n {
                d.push(std * std);
            }
        }
        d
    }
}

/// Per-run update counters, the behavioral fingerprint of a variant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct UpdateCounters {
    pub point_updates: u64,
    pub line_updates: u64,
    pub ci_point_updates: u64,
    pub ci_line_updates: u64,
    pub features_gated: u64,
    pub triangulation_failures: u64,
    pub ci_skipped: u64,
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub frames: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FeatureKind {
    Point,
    Line,
}

enum PendingTrack {
    Points(Vec<PointObservation>),
    Lines(Vec<LineObservation>),
}

struct PendingTop {
    kind: FeatureKind,
    top: TopBlock,
    estimate: crate::meas::FeatureEstimate,
    sigma: f64,
    track: PendingTrack,
}

/// One robot's filter over its own state plus the cooperative hooks.
pub struct RobotFilter {
    pub state: RobotState,
    pub cam: CameraModel,
    pub cfg: FilterConfig,
    pub variant: AlgorithmVariant,
    pub counters: UpdateCounters,
    point_tracks: HashMap<u64, Vec<PointObservation>>,
    line_tracks: HashMap<u64, Vec<LineObservation>>,
    pending: BTreeMap<u64, PendingTop>,
    last_imu_time: Option<f64>,
}

impl RobotFilter {
    pub fn new(
        robot_id: usize,
        imu: ImuState,
        calib: CalibState,
        t_d: f64,
        cam: CameraModel,
        cfg: FilterConfig,
        variant: AlgorithmVariant,
    ) -> Self {
        let state = RobotState::new(robot_id, imu, calib, t_d, &cfg.init_std.diagonal(), cfg.max_clones);
        Self {
            state,
            cam,
            cfg,
            variant,
            counters: UpdateCounters::default(),
            point_tracks: HashMap::new(),
            line_tracks: HashMap::new(),
            pending: BTreeMap::new(),
            last_imu_time: None,
        }
    }

    pub fn robot_id(&self) -> usize {
        self.state.robot_id
    }

    pub fn layout(&self) -> StateLayout {
        self.state.layout()
    }

    fn top_strong(&self, p: &crate::msckf::ProjectedResidual) -> bool {
        let svd = p.top.h_f1.clone().svd(false, false);
        let smin = svd.singular_values[svd.singular_values.len() - 1];
        smin >= self.cfg.min_share_strength * p.sigma
    }

    fn lin_opts(&self) -> LinearizationOptions {
        LinearizationOptions {
            fej: self.cfg.fej,
            estimate_calib: self.cfg.estimate_calib,
            time_tol: self.cfg.time_tol,
        }
    }

    /// Phase one of a frame. Returns the common-feature messages this robot
    /// broadcasts (empty when the variant shares nothing).
    pub fn process_frame(
        &mut self,
        t_cam: f64,
        imu: &[ImuSample],
        points: &[PointObservation],
        lines: &[LineObservation],
    ) -> Result<Vec<CommonFeatureMessage>> {
        let t_imu = t_cam - self.state.t_d;

        // propagate from the previous frame
        if let Some(last) = self.last_imu_time {
            let span = select_span(imu, last, t_imu)?;
            propagate_state(&mut self.state, &span, &self.cfg.noise)?;
        }
        self.last_imu_time = Some(t_imu);
        self.state.clone_at(t_imu)?;
        self.counters.frames += 1;

        // ingest this frame's observations
        let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
        for p in points {
            seen.insert(p.feature_id);
            self.point_tracks.entry(p.feature_id).or_default().push(p.clone());
        }
        if self.variant.use_lines_independent {
            for l in lines {
                seen.insert(l.feature_id);
                self.line_tracks.entry(l.feature_id).or_default().push(l.clone());
            }
        }

        // update set: ended tracks and tracks that filled the window
        let mature = |len: usize, id: &u64| len >= self.cfg.max_clones || !seen.contains(id);
        let mut point_ready: Vec<u64> = self
            .point_tracks
            .iter()
            .filter(|(id, t)| mature(t.len(), id))
            .map(|(id, _)| *id)
            .collect();
        point_ready.sort_unstable();
        let mut line_ready: Vec<u64> = self
            .line_tracks
            .iter()
            .filter(|(id, t)| mature(t.len(), id))
            .map(|(id, _)| *id)
            .collect();
        line_ready.sort_unstable();

        let opts = self.lin_opts();
        let mut blocks: Vec<(nalgebra::DVector<f64>, nalgebra::DMatrix<f64>, f64)> = Vec::new();
        let mut used_points = 0u64;
        let mut used_lines = 0u64;
        self.pending.clear();

        for id in point_ready {
            let track = self.point_tracks.remove(&id).unwrap();
            if track.len() < 2 {
                continue;
            }
            match self.try_point(&track, id, &opts) {
                Ok(Some((p, est))) => {
                    if chi2_gate(&self.state, &p.bottom, p.sigma) {
                        used_points += 1;
                        blocks.push((p.bottom.r2.clone(), p.bottom.h_x2.clone(), p.sigma));
                        if self.variant.use_common_points {
                            self.pending.insert(
                                id,
                                PendingTop {
                                    kind: FeatureKind::Point,
                                    top: p.top,
                                    estimate: est,
                                    sigma: p.sigma,
                                    track: PendingTrack::Points(track),
                                },
                            );
                        }
                    } else {
                        self.counters.features_gated += 1;
                    }
                }
                Ok(None) | Err(_) => {
                    self.counters.triangulation_failures += 1;
                }
            }
        }

        for id in line_ready {
            let track = self.line_tracks.remove(&id).unwrap();
            if track.len() < 2 {
                continue;
            }
            match self.try_line(&track, id, &opts) {
                Ok(Some((p, est))) => {
                    if chi2_gate(&self.state, &p.bottom, p.sigma) {
                        used_lines += 1;
                        blocks.push((p.bottom.r2.clone(), p.bottom.h_x2.clone(), p.sigma));
                        if self.variant.use_common_lines && self.top_strong(&p) {
                            self.pending.insert(
                                id,
                                PendingTop {
                                    kind: FeatureKind::Line,
                                    top: p.top,
                                    estimate: est,
                                    sigma: p.sigma,
                                    track: PendingTrack::Lines(track),
                                },
                            );
                        }
                    } else {
                        self.counters.features_gated += 1;
                    }
                }
                Ok(None) | Err(_) => {
                    self.counters.triangulation_failures += 1;
                }
            }
        }

        ekf_update(&mut self.state, &blocks)?;
        self.counters.point_updates += used_points;
        self.counters.line_updates += used_lines;

        // broadcast the retained tops
        let mut msgs = Vec::with_capacity(self.pending.len());
        for (id, pend) in &self.pending {
            let msg =
                CommonFeatureMessage::from_top(&self.state, *id, &pend.top, &pend.estimate, pend.sigma);
            self.counters.bytes_sent += msg.payload_bytes() as u64;
            self.counters.messages_sent += 1;
            msgs.push(msg);
        }
        Ok(msgs)
    }

    fn try_point(
        &self,
        track: &[PointObservation],
        id: u64,
        opts: &LinearizationOptions,
    ) -> Result<Option<(crate::msckf::ProjectedResidual, FeatureEstimate)>> {
        let mut pairs = Vec::with_capacity(track.len());
        let mut usable = Vec::with_capacity(track.len());
        for obs in track {
            let t = obs.cam_timestamp - self.state.t_d;
            let Some(ci) = self.state.find_clone(t, self.cfg.time_tol) else { continue };
            let clone = &self.state.clones[ci];
            pairs.push((obs.uv_normalized, CamPose::from_clone(&clone.q_gtoi, &clone.p_iing, &self.state.calib)));
            usable.push(obs.clone());
        }
        if usable.len() < 2 {
            return Ok(None);
        }
        let p_g = match triangulate_point(&pairs, &self.cfg.triangulation) {
            Ok(p) => p,
            Err(_) => return Ok(None),
        };
        let feature = TriangulatedFeature { feature_id: id, estimate: FeatureEstimate::Point(p_g) };
        let stacked = stack_point_feature(&self.state, &feature, &usable, &self.cam, opts)?;
        match nullspace_project(&stacked) {
            Ok(p) => Ok(Some((p, feature.estimate))),
            Err(Error::RankDeficientFeature) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn try_line(
        &self,
        track: &[LineObservation],
        id: u64,
        opts: &LinearizationOptions,
    ) -> Result<Option<(crate::msckf::ProjectedResidual, FeatureEstimate)>> {
        let mut pairs = Vec::with_capacity(track.len());
        let mut usable = Vec::with_capacity(track.len());
        for obs in track {
            let t = obs.cam_timestamp - self.state.t_d;
            let Some(ci) = self.state.find_clone(t, self.cfg.time_tol) else { continue };
            let clone = &self.state.clones[ci];
            pairs.push((obs, CamPose::from_clone(&clone.q_gtoi, &clone.p_iing, &self.state.calib)));
            usable.push(obs.clone());
        }
        if usable.len() < 2 {
            return Ok(None);
        }
        let line_g = match triangulate_line(&pairs, &self.cam, &self.cfg.triangulation) {
            Ok(l) => l,
            Err(_) => return Ok(None),
        };
        let feature = TriangulatedFeature { feature_id: id, estimate: FeatureEstimate::Line(line_g) };
        let stacked = stack_line_feature(&self.state, &feature, &usable, &self.cam, opts)?;
        match nullspace_project(&stacked) {
            Ok(p) => Ok(Some((p, feature.estimate))),
            Err(Error::RankDeficientFeature) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Phase two: fuses neighbor messages for the features this robot also
    /// linearized this frame, then slides the window.
    pub fn absorb_messages(&mut self, inbox: &[CommonFeatureMessage]) -> Result<()> {
        let mut by_feature: BTreeMap<u64, Vec<CommonFeatureMessage>> = BTreeMap::new();
        for m in inbox {
            if m.sender_id == self.state.robot_id {
                continue;
            }
            by_feature.entry(m.feature_id).or_default().push(m.clone());
        }

        // Relinearize each fusable common feature at the canonical estimate
        // (lowest participating sender), so every stacked block shares one
        // linearization point exactly, then apply one CI update for the
        // whole frame so a single weight vector pays for all constraints.
        let opts = self.lin_opts();
        let pending = std::mem::take(&mut self.pending);
        let mut systems = Vec::new();
        let mut kinds = Vec::new();
        for (id, pend) in pending {
            let Some(msgs) = by_feature.get(&id) else { continue };
            let canonical_msg = msgs.iter().min_by_key(|m| m.sender_id).unwrap();
            let own_wire = crate::coop::MessageFeature::from_estimate(&pend.estimate);
            let Ok(delta) = own_wire.boxminus(&canonical_msg.feature) else {
                self.counters.ci_skipped += 1;
                continue;
            };
            let within = match pend.kind {
                FeatureKind::Point => delta.norm() < 0.5,
                FeatureKind::Line => delta.fixed_rows::<3>(0).norm() < 0.02 && delta[3].abs() < 0.1,
            };
            if !within {
                self.counters.ci_skipped += 1;
                continue;
            }
            let canonical = match (&pend.kind, canonical_msg.feature.as_line()) {
                (FeatureKind::Line, Some(l)) => FeatureEstimate::Line(l),
                (FeatureKind::Point, _) => {
                    let crate::coop::MessageFeature::Point { p } = canonical_msg.feature else {
                        self.counters.ci_skipped += 1;
                        continue;
                    };
                    FeatureEstimate::Point(nalgebra::Vector3::new(p[0], p[1], p[2]))
                }
                _ => {
                    self.counters.ci_skipped += 1;
                    continue;
                }
            };
            let feature = TriangulatedFeature { feature_id: id, estimate: canonical.clone() };
            let restacked = match &pend.track {
                PendingTrack::Points(track) => {
                    stack_point_feature(&self.state, &feature, track, &self.cam, &opts)
                }
                PendingTrack::Lines(track) => {
                    stack_line_feature(&self.state, &feature, track, &self.cam, &opts)
                }
            };
            let own_top = match restacked.and_then(|s| nullspace_project(&s)) {
                Ok(p) => p.top,
                Err(_) => {
                    self.counters.ci_skipped += 1;
                    continue;
                }
            };
            let stacked = match stack_common(
                self.state.robot_id,
                id,
                &own_top,
                &canonical,
                pend.sigma,
                msgs,
            ) {
                Ok(s) => s,
                Err(_) => {
                    self.counters.ci_skipped += 1;
                    continue;
                }
            };
            match project_common(&stacked) {
                Ok(p) => {
                    systems.push(p);
                    kinds.push(pend.kind);
                }
                Err(_) => {
                    self.counters.ci_skipped += 1;
                }
            }
        }
        if !systems.is_empty() {
            let merged = merge_projected(systems)?;
            let weights =
                select_weights(self.state.robot_id, &merged, &self.state, self.cfg.weight_mode)?;
            match ci_update(&mut self.state, &merged, &weights, self.cfg.naive_fusion) {
                Ok(out) if out.applied => {
                    for kind in kinds {
                        match kind {
                            FeatureKind::Point => self.counters.ci_point_updates += 1,
                            FeatureKind::Line => self.counters.ci_line_updates += 1,
                        }
                    }
                }
                Ok(_) => {}
                Err(Error::SingularInnovation(_)) => {
                    self.counters.ci_skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }

        while self.state.clones.len() > self.cfg.max_clones {
            self.state.marginalize_oldest()?;
        }
        // drop track observations whose clones were marginalized
        let oldest = self.state.clones.first().map(|c| c.timestamp).unwrap_or(f64::NEG_INFINITY);
        let t_d = self.state.t_d;
        for track in self.point_tracks.values_mut() {
            track.retain(|o| o.cam_timestamp - t_d >= oldest - 1e-9);
        }
        for track in self.line_tracks.values_mut() {
            track.retain(|o| o.cam_timestamp - t_d >= oldest - 1e-9);
        }
        self.point_tracks.retain(|_, t| !t.is_empty());
        self.line_tracks.retain(|_, t| !t.is_empty());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{default_calib, figure_eight_controls, generate_run, SimConfig, TrajectorySpline};
    use nalgebra::Vector3;

    fn zero_noise_cfg() -> SimConfig {
        SimConfig {
            duration: 3.0,
            pixel_sigma: 0.0,
            noise: NoiseConfig::zero(),
            perturb_init: false,
            max_points_per_frame: Some(30),
            max_lines_per_frame: Some(15),
            ..Default::default()
        }
    }

    fn run_variant(variant: AlgorithmVariant) -> Vec<RobotFilter> {
        let sim_cfg = zero_noise_cfg();
        let base = TrajectorySpline::new(&figure_eight_controls(sim_cfg.duration + 4.0, 5.0)).unwrap();
        let cam = CameraModel { sigma_px: 1.0, ..Default::default() };
        let calib = default_calib();
        let data = generate_run(&sim_cfg, &base, &cam, &calib, 0).unwrap();

        // the filter keeps its nominal noise model even on noiseless data
        let fcfg = FilterConfig::default();
        let mut filters: Vec<RobotFilter> = (0..sim_cfg.num_robots)
            .map(|i| {
                let truth = &data.frames[0].robots[i].truth;
                let imu = ImuState {
                    q_gtoi: truth.q_gtoi,
                    p_iing: truth.p,
                    v_iing: truth.v,
                    bg: Vector3::zeros(),
                    ba: Vector3::zeros(),
                };
                RobotFilter::new(i, imu, calib.clone(), sim_cfg.t_d, cam.clone(), fcfg.clone(), variant)
            })
            .collect();

        for frame in &data.frames {
            let mut all_msgs = Vec::new();
            for (i, f) in filters.iter_mut().enumerate() {
                let rf = &frame.robots[i];
                let msgs = f
                    .process_frame(frame.t + f.state.t_d, &data.imu[i], &rf.points, &rf.lines)
                    .unwrap();
                all_msgs.extend(msgs);
            }
            for f in filters.iter_mut() {
                f.absorb_messages(&all_msgs).unwrap();
            }
        }
        filters
    }

    #[test]
    fn zero_noise_filters_stay_at_truth() {
        let filters = run_variant(AlgorithmVariant::pl_cvio());
        let sim_cfg = zero_noise_cfg();
        let base = TrajectorySpline::new(&figure_eight_controls(sim_cfg.duration + 4.0, 5.0)).unwrap();
        let cam = CameraModel::default();
        let calib = default_calib();
        let data = generate_run(&sim_cfg, &base, &cam, &calib, 0).unwrap();
        let last = data.frames.last().unwrap();
        for (i, f) in filters.iter().enumerate() {
            let err = (f.state.imu.p_iing - last.robots[i].truth.p).norm();
            assert!(err < 1e-3, "robot {i} drifted {err} m on noiseless data");
            assert!(f.counters.point_updates > 0);
        }
    }

    #[test]
    fn variant_counters_distinguish_pipelines() {
        let p_vio = run_variant(AlgorithmVariant::p_vio());
        assert!(p_vio.iter().all(|f| f.counters.line_updates == 0));
        assert!(p_vio.iter().all(|f| f.counters.ci_point_updates == 0 && f.counters.ci_line_updates == 0));
        assert!(p_vio.iter().all(|f| f.counters.messages_sent == 0));

        let pl_cvio = run_variant(AlgorithmVariant::pl_cvio());
        assert!(pl_cvio.iter().any(|f| f.counters.line_updates > 0));
        assert!(pl_cvio.iter().any(|f| f.counters.ci_point_updates > 0));
        assert!(pl_cvio.iter().any(|f| f.counters.messages_sent > 0));
    }

    #[test]
    fn window_respects_max_clones() {
        let filters = run_variant(AlgorithmVariant::p_vio());
        for f in &filters {
            assert!(f.state.clones.len() <= f.cfg.max_clones);
        }
    }
}

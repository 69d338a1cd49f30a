//! Landmark world: threshold-driven feature generation and measurement
//! synthesis.
//!
//! Landmarks persist across frames and robots, so robots with overlapping
//! views observe the same feature ids; that overlap is what the cooperative
//! update feeds on. New landmarks are spawned into the viewing frustum of
//! whichever robot is below its per-frame budget.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::meas::{CamPose, CameraModel, LineObservation, PointObservation};

#[derive(Debug, Clone)]
pub struct PointLandmark {
    pub id: u64,
    pub p: Vector3<f64>,
    pub last_seen_frame: u64,
}

#[derive(Debug, Clone)]
pub struct LineLandmark {
    pub id: u64,
    pub p1: Vector3<f64>,
    pub p2: Vector3<f64>,
    pub last_seen_frame: u64,
}

/// Spawning and visibility parameters.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub depth_min: f64,
    pub depth_max: f64,
    /// Lines spawn in a nearer band than points: distant lines carry almost
    /// no constraint at typical baselines.
    pub line_depth_min: f64,
    pub line_depth_max: f64,
    pub line_len_min: f64,
    pub line_len_max: f64,
    pub min_seg_px: f64,
    pub image_margin: f64,
    /// Frames a landmark may stay invisible to every robot before pruning.
    pub prune_after_frames: u64,
    pub z_min: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            depth_min: 4.0,
            depth_max: 25.0,
            line_depth_min: 1.5,
            line_depth_max: 7.0,
            line_len_min: 2.0,
            line_len_max: 6.0,
            min_seg_px: 50.0,
            image_margin: 2.0,
            prune_after_frames: 40,
            z_min: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimWorld {
    pub points: Vec<PointLandmark>,
    pub lines: Vec<LineLandmark>,
    next_id: u64,
}

fn point_visible(cam: &CameraModel, pose: &CamPose, cfg: &WorldConfig, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    let p_c = pose.to_camera(p);
    if p_c.z <= cfg.z_min || p_c.z > cfg.depth_max * 1.5 {
        return None;
    }
    let px = cam.pixel(&Vector2::new(p_c.x / p_c.z, p_c.y / p_c.z));
    cam.contains(&px, cfg.image_margin).then_some(px)
}

fn line_visible(
    cam: &CameraModel,
    pose: &CamPose,
    cfg: &WorldConfig,
    l: &LineLandmark,
) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let c1 = pose.to_camera(&l.p1);
    let c2 = pose.to_camera(&l.p2);
    if c1.z <= cfg.z_min || c2.z <= cfg.z_min {
        return None;
    }
    let px1 = cam.pixel(&Vector2::new(c1.x / c1.z, c1.y / c1.z));
    let px2 = cam.pixel(&Vector2::new(c2.x / c2.z, c2.y / c2.z));
    let clipped = clip_segment(&px1, &px2, cam, cfg.image_margin)?;
    ((clipped.0 - clipped.1).norm() >= cfg.min_seg_px).then_some(clipped)
}

impl SimWorld {
    pub fn new() -> Self {
        Self::default()
    }

    /// Spawns landmarks into the frustum until the robot's per-frame budgets
    /// are met, then returns this robot's observations of the world.
    #[allow(clippy::too_many_arguments)]
    pub fn observe_frame(
        &mut self,
        frame: u64,
        t: f64,
        robot_id: usize,
        cam: &CameraModel,
        pose: &CamPose,
        cfg: &WorldConfig,
        budget_points: usize,
        budget_lines: usize,
        sigma_px: f64,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<PointObservation>, Vec<LineObservation>) {
        // count what is already visible, then top up
        let visible_points = self
            .points
            .iter()
            .filter(|l| point_visible(cam, pose, cfg, &l.p).is_some())
            .count();
        for _ in visible_points..budget_points {
            let p = self.sample_frustum_point(cam, pose, cfg, rng);
            let id = self.next_id;
            self.next_id += 1;
            self.points.push(PointLandmark { id, p, last_seen_frame: frame });
        }

        let visible_lines = self
            .lines
            .iter()
            .filter(|l| line_visible(cam, pose, cfg, l).is_some())
            .count();
        let mut spawned = 0;
        let mut attempts = 0;
        while spawned < budget_lines.saturating_sub(visible_lines) && attempts < 50 * budget_lines.max(1) {
            attempts += 1;
            let mid = self.sample_frustum_line_midpoint(cam, pose, cfg, rng);
            let dir = random_unit(rng);
            let half = 0.5 * rng.random_range(cfg.line_len_min..cfg.line_len_max);
            let cand = LineLandmark {
                id: self.next_id,
                p1: mid - half * dir,
                p2: mid + half * dir,
                last_seen_frame: frame,
            };
            if line_visible(cam, pose, cfg, &cand).is_some() {
                self.next_id += 1;
                self.lines.push(cand);
                spawned += 1;
            }
        }

        // synthesize this robot's measurements
        let mut points_out = Vec::new();
        for lm in &mut self.points {
            let Some(px) = point_visible(cam, pose, cfg, &lm.p) else {
                continue;
            };
            lm.last_seen_frame = frame;
            let noisy = Vector2::new(
                px.x + sigma_px * gauss(rng),
                px.y + sigma_px * gauss(rng),
            );
            points_out.push(PointObservation {
                feature_id: lm.id,
                robot_id,
                cam_timestamp: t,
                uv_normalized: cam.normalize(&noisy),
            });
        }

        let mut lines_out = Vec::new();
        for lm in &mut self.lines {
            let Some((e1, e2)) = line_visible(cam, pose, cfg, lm) else {
                continue;
            };
            lm.last_seen_frame = frame;
            let id = lm.id;
            let n1 = Vector2::new(
                e1.x + sigma_px * gauss(rng),
                e1.y + sigma_px * gauss(rng),
            );
            let n2 = Vector2::new(
                e2.x + sigma_px * gauss(rng),
                e2.y + sigma_px * gauss(rng),
            );
            lines_out.push(LineObservation {
                feature_id: id,
                robot_id,
                cam_timestamp: t,
                x_s: Vector3::new(n1.x, n1.y, 1.0),
                x_e: Vector3::new(n2.x, n2.y, 1.0),
            });
        }

        (points_out, lines_out)
    }

    /// Drops landmarks that no robot has seen for a while; ids never recycle.
    pub fn prune(&mut self, frame: u64, cfg: &WorldConfig) {
        let keep = |last: u64| frame.saturating_sub(last) <= cfg.prune_after_frames;
        self.points.retain(|l| keep(l.last_seen_frame));
        self.lines.retain(|l| keep(l.last_seen_frame));
    }

    fn sample_frustum_point(
        &self,
        cam: &CameraModel,
        pose: &CamPose,
        cfg: &WorldConfig,
        rng: &mut ChaCha8Rng,
    ) -> Vector3<f64> {
        sample_frustum(cam, pose, rng, cfg.depth_min, cfg.depth_max, cfg.image_margin)
    }

    fn sample_frustum_line_midpoint(
        &self,
        cam: &CameraModel,
        pose: &CamPose,
        cfg: &WorldConfig,
        rng: &mut ChaCha8Rng,
    ) -> Vector3<f64> {
        sample_frustum(cam, pose, rng, cfg.line_depth_min, cfg.line_depth_max, cfg.image_margin)
    }
}

fn sample_frustum(
    cam: &CameraModel,
    pose: &CamPose,
    rng: &mut ChaCha8Rng,
    depth_min: f64,
    depth_max: f64,
    image_margin: f64,
) -> Vector3<f64> {
    let margin = image_margin + 10.0;
    let px = Vector2::new(
        rng.random_range(margin..cam.width as f64 - margin),
        rng.random_range(margin..cam.height as f64 - margin),
    );
    let uv = cam.normalize(&px);
    let depth = rng.random_range(depth_min..depth_max);
    let ray = Vector3::new(uv.x, uv.y, 1.0) * depth;
    pose.center + pose.r_gtoc.transpose() * ray
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n < 1.0 {
            return v / n;
        }
    }
}

/// Liang-Barsky clip of a 2D segment against the image rectangle.
pub fn clip_segment(
    a: &Vector2<f64>,
    b: &Vector2<f64>,
    cam: &CameraModel,
    margin: f64,
) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let (xmin, ymin) = (margin, margin);
    let (xmax, ymax) = (cam.width as f64 - margin, cam.height as f64 - margin);
    let d = b - a;
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    let checks = [
        (-d.x, a.x - xmin),
        (d.x, xmax - a.x),
        (-d.y, a.y - ymin),
        (d.y, ymax - a.y),
    ];
    for (p, q) in checks {
        if p.abs() < 1e-15 {
            if q < 0.0 {
                return None;
            }
            continue;
        }
        let r = q / p;
        if p < 0.0 {
            if r > t1 {
                return None;
            }
            t0 = t0.max(r);
        } else {
            if r < t0 {
                return None;
            }
            t1 = t1.min(r);
        }
    }
    if t0 > t1 {
        return None;
    }
    Some((a + t0 * d, a + t1 * d))
}

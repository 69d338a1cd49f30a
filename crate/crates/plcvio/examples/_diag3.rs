// single-shot two-robot common-feature fusion: posterior consistency and gain
use nalgebra::{DVector, Vector2, Vector3};
use plcvio::coop::*;
use plcvio::geom::UnitQuaternion;
use plcvio::meas::*;
use plcvio::msckf::*;
use plcvio::state::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rng: &mut ChaCha8Rng) -> f64 { Distribution::<f64>::sample(&StandardNormal, rng) }

fn make_pair(rng: &mut ChaCha8Rng, shift: f64) -> (RobotState, RobotState, DVector<f64>) {
    let drift = shift == 0.0; // robot A drifted, robot B confident
    let base: Vec<f64> = {
        let std = [8.7e-3f64, 8.7e-3, 8.7e-3, 0.02, 0.02, 0.02, 0.05,0.05,0.05, 2e-3,2e-3,2e-3, 2e-2,2e-2,2e-2, 3.5e-3,3.5e-3,3.5e-3, 5e-3,5e-3,5e-3, 0.0];
        std.iter().map(|s| s * s).collect()
    };
    let mut truth = RobotState::new(0, ImuState::default(), CalibState::default(), 0.0, &base, 11);
    for k in 0..8 {
        truth.imu.p_iing = Vector3::new(0.12 * k as f64 + shift, 0.02 * k as f64, 0.01 * k as f64);
        truth.imu.q_gtoi = UnitQuaternion::from_axis_angle(&Vector3::z(), 0.02 * k as f64);
        truth.clone_at(k as f64 * 0.05).unwrap();
    }
    let mut est = truth.clone();
    let dim = est.err_dim();
    let l = est.layout();
    let mut p = nalgebra::DMatrix::zeros(dim, dim);
    for i in 0..22 { p[(i, i)] = est.cov[(i, i)]; }
    let (sth, spos) = if drift { (3.5e-2, 0.15) } else { (4e-3, 0.01) };
    for c in 0..est.clones.len() {
        for j in 0..3 {
            p[(l.clone(c)+j, l.clone(c)+j)] = sth * sth;
            p[(l.clone(c)+3+j, l.clone(c)+3+j)] = spos * spos;
        }
    }
    // drift is common-mode across the window, like real accumulated error
    if drift {
        let common: Vec<f64> = (0..6).map(|_| gauss(rng)).collect();
        for c1 in 0..est.clones.len() {
            for c2 in 0..est.clones.len() {
                if c1 == c2 { continue; }
                for j in 0..3 {
                    p[(l.clone(c1)+j, l.clone(c2)+j)] = 0.9 * sth * sth;
                    p[(l.clone(c1)+3+j, l.clone(c2)+3+j)] = 0.9 * spos * spos;
                }
            }
        }
        let _ = common;
    }
    est.cov = p;
    let mut dx = DVector::zeros(dim);
    for i in 0..22 { dx[i] = est.cov[(i, i)].sqrt() * gauss(rng); }
    if drift {
        // sample the clone errors from the correlated model: common + small iid
        let mut common = [0.0; 6];
        for v in common.iter_mut() { *v = gauss(rng); }
        for c in 0..est.clones.len() {
            for j in 0..6 {
                let (std, base) = if j < 3 { (3.5e-2, l.clone(c)+j) } else { (0.15, l.clone(c)+j) };
                dx[base] = std * ((0.9f64).sqrt() * common[j] + (0.1f64).sqrt() * gauss(rng));
            }
        }
    } else {
        for c in 0..est.clones.len() {
            for j in 0..6 {
                let std = if j < 3 { 4e-3 } else { 0.01 };
                dx[l.clone(c)+j] = std * gauss(rng);
            }
        }
    }
    est.apply_correction(&dx).unwrap();
    est.fej_values = est.clones.clone();
    (truth, est, dx)
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or("line".into());
    let mut rng = ChaCha8Rng::seed_from_u64(321);
    let cam = CameraModel::default();
    let tri = TriangulationConfig::default();
    let opts = LinearizationOptions { fej: false, ..Default::default() };
    let sigma_px = 2.0;
    let mut nees_acc = 0.0;
    let mut tr_gain_acc = 0.0;
    let mut err_drop = 0.0;
    let mut used = 0;
    for _ in 0..400 {
        let (truth_a, mut est_a, _) = make_pair(&mut rng, 0.0);
        let (truth_b, mut est_b, _) = make_pair(&mut rng, 0.4);
        est_b.robot_id = 1;

        // common landmark
        let (own_sys, msg_b) = if which == "line" {
            let p1 = Vector3::new(rng.random_range(-1.5..0.5), rng.random_range(-1.0..1.0), rng.random_range(3.0..5.0));
            let p2 = p1 + Vector3::new(rng.random_range(1.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
            let mk_obs = |truth: &RobotState, rng: &mut ChaCha8Rng| -> Vec<LineObservation> {
                truth.clones.iter().filter_map(|c| {
                    let project = |p: &Vector3<f64>| -> Option<Vector2<f64>> {
                        let uv = predict_point(p, c, &truth.calib, 1e-3).ok()?;
                        Some(cam.pixel(&uv))
                    };
                    let (a, b) = (project(&p1)?, project(&p2)?);
                    if (a - b).norm() < 60.0 { return None; }
                    Some(LineObservation {
                        feature_id: 1, robot_id: truth.robot_id, cam_timestamp: c.timestamp,
                        x_s: Vector3::new(a.x + sigma_px * gauss(rng), a.y + sigma_px * gauss(rng), 1.0),
                        x_e: Vector3::new(b.x + sigma_px * gauss(rng), b.y + sigma_px * gauss(rng), 1.0),
                    })
                }).collect()
            };
            let obs_a = mk_obs(&truth_a, &mut rng);
            let obs_b = mk_obs(&truth_b, &mut rng);
            if obs_a.len() < 4 || obs_b.len() < 4 { continue; }
            let tri_for = |est: &RobotState, obs: &[LineObservation]| -> Option<plcvio::geom::CPLine> {
                let pairs: Vec<(&LineObservation, CamPose)> = obs.iter().map(|o| {
                    let ci = est.find_clone(o.cam_timestamp, 1e-6).unwrap();
                    let c = &est.clones[ci];
                    (o, CamPose::from_clone(&c.q_gtoi, &c.p_iing, &est.calib))
                }).collect();
                triangulate_line(&pairs, &cam, &tri).ok()
            };
            let (Some(line_b),) = (tri_for(&est_b, &obs_b),) else { continue };
            // B's message
            let feat_b = TriangulatedFeature { feature_id: 1, estimate: FeatureEstimate::Line(line_b) };
            let Ok(stacked_b) = stack_line_feature(&est_b, &feat_b, &obs_b, &cam, &opts) else { continue };
            let Ok(proj_b) = nullspace_project(&stacked_b) else { continue };
            let msg = CommonFeatureMessage::from_top(&est_b, 1, &proj_b.top, &feat_b.estimate, proj_b.sigma);
            // A relinearizes at B's estimate (canonical)
            let canonical = FeatureEstimate::Line(line_b);
            let feat_a = TriangulatedFeature { feature_id: 1, estimate: canonical.clone() };
            let Ok(stacked_a) = stack_line_feature(&est_a, &feat_a, &obs_a, &cam, &opts) else { continue };
            let Ok(proj_a) = nullspace_project(&stacked_a) else { continue };
            let Ok(sys) = stack_common(0, 1, &proj_a.top, &canonical, proj_a.sigma, &[msg.clone()]) else { continue };
            (sys, msg)
        } else {
            let pt = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0));
            let mk_obs = |truth: &RobotState, rng: &mut ChaCha8Rng| -> Vec<PointObservation> {
                truth.clones.iter().filter_map(|c| {
                    let uv = predict_point(&pt, c, &truth.calib, 1e-3).ok()?;
                    let px = cam.pixel(&uv);
                    let noisy = Vector2::new(px.x + sigma_px * gauss(rng), px.y + sigma_px * gauss(rng));
                    Some(PointObservation { feature_id: 1, robot_id: truth.robot_id, cam_timestamp: c.timestamp, uv_normalized: cam.normalize(&noisy) })
                }).collect()
            };
            let obs_a = mk_obs(&truth_a, &mut rng);
            let obs_b = mk_obs(&truth_b, &mut rng);
            if obs_a.len() < 4 || obs_b.len() < 4 { continue; }
            let tri_for = |est: &RobotState, obs: &[PointObservation]| -> Option<Vector3<f64>> {
                let pairs: Vec<(Vector2<f64>, CamPose)> = obs.iter().map(|o| {
                    let ci = est.find_clone(o.cam_timestamp, 1e-6).unwrap();
                    let c = &est.clones[ci];
                    (o.uv_normalized, CamPose::from_clone(&c.q_gtoi, &c.p_iing, &est.calib))
                }).collect();
                triangulate_point(&pairs, &tri).ok()
            };
            let (Some(pt_b),) = (tri_for(&est_b, &obs_b),) else { continue };
            let feat_b = TriangulatedFeature { feature_id: 1, estimate: FeatureEstimate::Point(pt_b) };
            let Ok(stacked_b) = stack_point_feature(&est_b, &feat_b, &obs_b, &cam, &opts) else { continue };
            let Ok(proj_b) = nullspace_project(&stacked_b) else { continue };
            let msg = CommonFeatureMessage::from_top(&est_b, 1, &proj_b.top, &feat_b.estimate, proj_b.sigma);
            let canonical = FeatureEstimate::Point(pt_b);
            let feat_a = TriangulatedFeature { feature_id: 1, estimate: canonical.clone() };
            let Ok(stacked_a) = stack_point_feature(&est_a, &feat_a, &obs_a, &cam, &opts) else { continue };
            let Ok(proj_a) = nullspace_project(&stacked_a) else { continue };
            let Ok(sys) = stack_common(0, 1, &proj_a.top, &canonical, proj_a.sigma, &[msg.clone()]) else { continue };
            (sys, msg)
        };
        let _ = msg_b;
        let Ok(projected) = project_common(&own_sys) else { continue };
        let Ok(weights) = select_weights(0, &projected, &est_a, WeightMode::FixedOwn(0.8)) else { continue };
        let pos_err_before = clone_pos_err(&truth_a, &est_a);
        let tr_before = est_a.cov.trace();
        let Ok(out) = ci_update(&mut est_a, &projected, &weights, false) else { continue };
        if !out.applied { continue; }
        tr_gain_acc += (tr_before - est_a.cov.trace()) / tr_before;
        err_drop += pos_err_before - clone_pos_err(&truth_a, &est_a);
        // posterior clone-0 NEES
        let l = est_a.layout();
        let c0 = l.clone(0);
        let dth = truth_a.clones[0].q_gtoi.boxminus(&est_a.clones[0].q_gtoi);
        let dpp = truth_a.clones[0].p_iing - est_a.clones[0].p_iing;
        let e = DVector::from_vec(vec![dth.x, dth.y, dth.z, dpp.x, dpp.y, dpp.z]);
        let p6 = est_a.cov.view((c0, c0), (6, 6)).clone_owned();
        let Some(ch) = p6.cholesky() else { continue };
        nees_acc += e.dot(&ch.solve(&e));
        used += 1;
    }
    println!("{which}: fused {used}/400 | posterior clone NEES {:.3} (expect ~6) | mean trace gain {:.4}% | mean |pos err| drop {:.5} m",
        nees_acc / used as f64, 100.0 * tr_gain_acc / used as f64, err_drop / used as f64);
}

fn clone_pos_err(truth: &RobotState, est: &RobotState) -> f64 {
    truth.clones.iter().zip(est.clones.iter()).map(|(t, e)| (t.p_iing - e.p_iing).norm()).sum::<f64>() / truth.clones.len() as f64
}

// single-shot consistency of the line vs point update machinery
use nalgebra::{DVector, Vector2, Vector3};
use plcvio::geom::{CPLine, PluckerLine, UnitQuaternion};
use plcvio::meas::*;
use plcvio::msckf::*;
use plcvio::state::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rng: &mut ChaCha8Rng) -> f64 { Distribution::<f64>::sample(&StandardNormal, rng) }

fn main() {
    let which = std::env::args().nth(1).unwrap_or("line".into());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cam = CameraModel::default();
    let tri = TriangulationConfig::default();
    let n_trials = 500;
    let mut nees_acc = 0.0;
    let mut used = 0;
    for _ in 0..n_trials {
        // true state: 8 clones along a gentle arc
        let base: Vec<f64> = {
            let std = [8.7e-3f64, 8.7e-3, 8.7e-3, 0.02, 0.02, 0.02, 0.05,0.05,0.05, 2e-3,2e-3,2e-3, 2e-2,2e-2,2e-2, 3.5e-3,3.5e-3,3.5e-3, 5e-3,5e-3,5e-3, 0.0];
            std.iter().map(|s| s * s).collect()
        };
        let mut truth = RobotState::new(0, ImuState::default(), CalibState::default(), 0.0, &base, 11);
        for k in 0..8 {
            truth.imu.p_iing = Vector3::new(0.12 * k as f64, 0.02 * k as f64, 0.01 * k as f64);
            truth.imu.q_gtoi = UnitQuaternion::from_axis_angle(&Vector3::z(), 0.02 * k as f64);
            truth.clone_at(k as f64 * 0.05).unwrap();
        }
        // estimated state: truth perturbed consistently with P
        let mut est = truth.clone();
        let dim = est.err_dim();
        // set clone-block covariance: sample a consistent dx including clones
        // simple approach: diagonal P with modest clone stds
        let mut dx = DVector::zeros(dim);
        let l = est.layout();
        // fully diagonal covariance consistent with the independent draws
        let mut p = nalgebra::DMatrix::zeros(dim, dim);
        for i in 0..22 {
            p[(i, i)] = est.cov[(i, i)];
        }
        for c in 0..est.clones.len() {
            for j in 0..3 {
                p[(l.clone(c)+j, l.clone(c)+j)] = 8.7e-3f64.powi(2);
                p[(l.clone(c)+3+j, l.clone(c)+3+j)] = 0.02f64.powi(2);
            }
        }
        p[(l.td(), l.td())] = 0.0;
        est.cov = p.clone();
        for i in 0..dim {
            dx[i] = p[(i, i)].sqrt() * gauss(&mut rng);
        }
        est.apply_correction(&dx).unwrap();
        // re-snap fej to the perturbed estimate (single-shot test: fej == lin point)
        est.fej_values = est.clones.clone();

        let sigma_px = 1.0;
        let opts = LinearizationOptions { fej: false, ..Default::default() };

        let projected = if which == "line" {
            let p1 = Vector3::new(-0.8, -0.5, 4.0) + Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..2.0));
            let p2 = p1 + Vector3::new(rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
            // observations from TRUE poses with noise
            let mut obs = Vec::new();
            for c in &truth.clones {
                let project = |p: &Vector3<f64>| -> Option<Vector2<f64>> {
                    let uv = predict_point(p, c, &truth.calib, 1e-3).ok()?;
                    Some(cam.pixel(&uv))
                };
                let (Some(a), Some(b)) = (project(&p1), project(&p2)) else { continue };
                if (a - b).norm() < 60.0 { continue; }
                obs.push(LineObservation {
                    feature_id: 1, robot_id: 0, cam_timestamp: c.timestamp,
                    x_s: Vector3::new(a.x + sigma_px * gauss(&mut rng), a.y + sigma_px * gauss(&mut rng), 1.0),
                    x_e: Vector3::new(b.x + sigma_px * gauss(&mut rng), b.y + sigma_px * gauss(&mut rng), 1.0),
                });
            }
            if obs.len() < 4 { eprintln!("too few obs {}", obs.len()); continue; }
            // triangulate from ESTIMATED clones (like the filter does)
            let pairs: Vec<(&LineObservation, CamPose)> = obs.iter().map(|o| {
                let ci = est.find_clone(o.cam_timestamp, 1e-6).unwrap();
                let c = &est.clones[ci];
                (o, CamPose::from_clone(&c.q_gtoi, &c.p_iing, &est.calib))
            }).collect();
            let line = match triangulate_line(&pairs, &cam, &tri) { Ok(l) => l, Err(e) => { eprintln!("tri fail: {e}"); continue } };
            let feat = TriangulatedFeature { feature_id: 1, estimate: FeatureEstimate::Line(line) };
            let Ok(stacked) = stack_line_feature(&est, &feat, &obs, &cam, &opts) else { continue };
            let Ok(p) = nullspace_project(&stacked) else { continue };
            p
        } else {
            let pt = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(3.0..8.0));
            let mut obs = Vec::new();
            for c in &truth.clones {
                let Ok(uv) = predict_point(&pt, c, &truth.calib, 1e-3) else { continue };
                let px = cam.pixel(&uv);
                let noisy = Vector2::new(px.x + sigma_px * gauss(&mut rng), px.y + sigma_px * gauss(&mut rng));
                obs.push(PointObservation { feature_id: 1, robot_id: 0, cam_timestamp: c.timestamp, uv_normalized: cam.normalize(&noisy) });
            }
            if obs.len() < 4 { eprintln!("too few obs {}", obs.len()); continue; }
            let pairs: Vec<(Vector2<f64>, CamPose)> = obs.iter().map(|o| {
                let ci = est.find_clone(o.cam_timestamp, 1e-6).unwrap();
                let c = &est.clones[ci];
                (o.uv_normalized, CamPose::from_clone(&c.q_gtoi, &c.p_iing, &est.calib))
            }).collect();
            let p3 = match triangulate_point(&pairs, &tri) { Ok(l) => l, Err(e) => { eprintln!("tri fail: {e}"); continue } };
            let feat = TriangulatedFeature { feature_id: 1, estimate: FeatureEstimate::Point(p3) };
            let Ok(stacked) = stack_point_feature(&est, &feat, &obs, &cam, &opts) else { continue };
            let Ok(p) = nullspace_project(&stacked) else { continue };
            p
        };

        {
            let rows = projected.bottom.r2.len();
            let hp = &projected.bottom.h_x2 * &est.cov;
            let mut s = &hp * projected.bottom.h_x2.transpose();
            for i in 0..rows { s[(i, i)] += projected.sigma * projected.sigma; }
            let gamma = projected.bottom.r2.dot(&s.cholesky().unwrap().solve(&projected.bottom.r2));
            eprintln!("gamma = {gamma:.2} rows = {rows} sigma = {:.3e}", projected.sigma);
        }
        if !chi2_gate(&est, &projected.bottom, projected.sigma) { continue; }
        independent_update(&mut est, &[projected]).unwrap();

        // posterior NEES of clone 0 pose (6-dim): error vs posterior covariance
        let lready = est.layout();
        let c0 = lready.clone(0);
        let dth = truth.clones[0].q_gtoi.boxminus(&est.clones[0].q_gtoi);
        let dpp = truth.clones[0].p_iing - est.clones[0].p_iing;
        let e = DVector::from_vec(vec![dth.x, dth.y, dth.z, dpp.x, dpp.y, dpp.z]);
        let p6 = est.cov.view((c0, c0), (6, 6)).clone_owned();
        let Some(ch) = p6.cholesky() else { continue };
        nees_acc += e.dot(&ch.solve(&e));
        used += 1;
    }
    println!("{}: single-shot posterior clone-pose NEES over {} trials: {:.3} (expect ~6)", which, used, nees_acc / used as f64);
}

// Scratch FD check of the line Jacobians (promoted into the acceptance suite later).
use nalgebra::{Vector2, Vector3};
use plcvio::geom::{CPLine, PluckerLine, UnitQuaternion};
use plcvio::meas::{line_jacobians, line_residual, project_line, CameraModel, LineObservation};
use plcvio::state::{CalibState, ClonePose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-s..s))
}

#[test]
fn line_jacobians_vs_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cam = CameraModel::default();
    let mut checked = 0;
    let mut max_rel = 0.0f64;
    while checked < 40 {
        let clone = ClonePose {
            timestamp: 0.0,
            q_gtoi: UnitQuaternion::from_axis_angle(&rand_vec(&mut rng, 1.0).normalize(), rng.random_range(-1.0..1.0)),
            p_iing: rand_vec(&mut rng, 2.0),
        };
        let calib = CalibState {
            q_itoc: UnitQuaternion::from_axis_angle(&rand_vec(&mut rng, 1.0).normalize(), rng.random_range(-1.0..1.0)),
            p_iinc: rand_vec(&mut rng, 0.2),
        };
        let p1 = rand_vec(&mut rng, 4.0);
        let p2 = p1 + rand_vec(&mut rng, 3.0);
        let Ok(pl) = PluckerLine::from_points(&p1, &p2, 1e-6) else { continue };
        let Ok(norm) = pl.normalized() else { continue };
        let Ok(line) = CPLine::from_plucker(&norm) else { continue };
        if line.d < 0.3 { continue; }
        let Ok(l) = project_line(&line, &clone, &calib, &cam) else { continue };
        if (l.x * l.x + l.y * l.y) < 1e-4 { continue; }
        let obs = LineObservation {
            feature_id: 0, robot_id: 0, cam_timestamp: 0.0,
            x_s: Vector3::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0), 1.0),
            x_e: Vector3::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0), 1.0),
        };
        let Ok(jac) = line_jacobians(&line, &obs, &clone, &clone, &calib, &cam) else { continue };

        let eval = |cl: &ClonePose, ca: &CalibState, lg: &CPLine| -> Option<Vector2<f64>> {
            let l = project_line(lg, cl, ca, &cam).ok()?;
            line_residual(&obs, &l).ok()
        };
        let h = 1e-6;
        let mut bad = false;
        let scale = 1.0f64.max(jac.h_theta.abs().max()).max(jac.h_feat.abs().max());
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let qp = UnitQuaternion::small_angle(&d).multiply(&clone.q_gtoi);
            let qm = UnitQuaternion::small_angle(&(-d)).multiply(&clone.q_gtoi);
            let (Some(rp), Some(rm)) = (
                eval(&ClonePose { q_gtoi: qp, ..clone.clone() }, &calib, &line),
                eval(&ClonePose { q_gtoi: qm, ..clone.clone() }, &calib, &line),
            ) else { bad = true; break };
            let fd = (rp - rm) / (2.0 * h);
            max_rel = max_rel.max((fd - jac.h_theta.column(k)).norm() / scale);

            let (Some(rp), Some(rm)) = (
                eval(&ClonePose { p_iing: clone.p_iing + d, ..clone.clone() }, &calib, &line),
                eval(&ClonePose { p_iing: clone.p_iing - d, ..clone.clone() }, &calib, &line),
            ) else { bad = true; break };
            let fd = (rp - rm) / (2.0 * h);
            max_rel = max_rel.max((fd - jac.h_pos.column(k)).norm() / scale);

            let cp = CalibState { q_itoc: UnitQuaternion::small_angle(&d).multiply(&calib.q_itoc), ..calib.clone() };
            let cm = CalibState { q_itoc: UnitQuaternion::small_angle(&(-d)).multiply(&calib.q_itoc), ..calib.clone() };
            let (Some(rp), Some(rm)) = (eval(&clone, &cp, &line), eval(&clone, &cm, &line)) else { bad = true; break };
            let fd = (rp - rm) / (2.0 * h);
            max_rel = max_rel.max((fd - jac.h_calib_theta.column(k)).norm() / scale);

            let cp = CalibState { p_iinc: calib.p_iinc + d, ..calib.clone() };
            let cm = CalibState { p_iinc: calib.p_iinc - d, ..calib.clone() };
            let (Some(rp), Some(rm)) = (eval(&clone, &cp, &line), eval(&clone, &cm, &line)) else { bad = true; break };
            let fd = (rp - rm) / (2.0 * h);
            max_rel = max_rel.max((fd - jac.h_calib_pos.column(k)).norm() / scale);
        }
        if bad { continue; }
        for k in 0..4 {
            let mut e = plcvio::geom::CPLineError::default();
            if k < 3 { e.dtheta[k] = h; } else { e.dd = h; }
            let lp = line.boxplus(&e);
            if k < 3 { e.dtheta[k] = -h; } else { e.dd = -h; }
            let lm = line.boxplus(&e);
            let (Some(rp), Some(rm)) = (eval(&clone, &calib, &lp), eval(&clone, &calib, &lm)) else { bad = true; break };
            let fd = (rp - rm) / (2.0 * h);
            max_rel = max_rel.max((fd - jac.h_feat.column(k)).norm() / scale);
        }
        if bad { continue; }
        checked += 1;
    }
    println!("line jacobian max rel err over {checked} configs: {max_rel:.3e}");
    assert!(max_rel < 1e-5, "line jacobian FD mismatch: {max_rel:.3e}");
}

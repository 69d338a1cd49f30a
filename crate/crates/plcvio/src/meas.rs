//! Point and line measurement models, analytic Jacobians, and feature
//! triangulation.
//!
//! Points live in normalized image coordinates; the perspective model is
//! `Π([x y z]ᵀ) = [x/z y/z]ᵀ` after the global→camera transform
//! `ᶜx = R_ItoC R_GtoI (ᴳx − ᴳp_I) + ᶜp_I`.
//!
//! Lines are measured as the signed distances of two observed segment
//! endpoints (pixels, homogeneous) to the projected infinite line; the
//! endpoints never need to correspond across frames. The 3D line is carried
//! in the global frame as a [`CPLine`] and moved through the 6x6 Plücker
//! transforms before the line projection matrix is applied.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, GateReason, Result};
use crate::geom::{skew, CPLine, CPLineError, PluckerLine, UnitQuaternion};
use crate::state::{CalibState, ClonePose};

/// Pinhole intrinsics plus the pixel noise level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub f_u: f64,
    pub f_v: f64,
    pub c_u: f64,
    pub c_v: f64,
    pub width: u32,
    pub height: u32,
    pub sigma_px: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { f_u: 460.0, f_v: 460.0, c_u: 320.0, c_v: 240.0, width: 640, height: 480, sigma_px: 1.0 }
    }
}

impl CameraModel {
    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.c_u) / self.f_u, (px.y - self.c_v) / self.f_v)
    }

    pub fn pixel(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(uv.x * self.f_u + self.c_u, uv.y * self.f_v + self.c_v)
    }

    pub fn contains(&self, px: &Vector2<f64>, margin: f64) -> bool {
        px.x >= margin
            && px.y >= margin
            && px.x <= self.width as f64 - margin
            && px.y <= self.height as f64 - margin
    }

    /// Point pixel noise converted to normalized units.
    pub fn sigma_norm(&self) -> f64 {
        self.sigma_px / (0.5 * (self.f_u + self.f_v))
    }

    /// Line projection matrix mapping the camera-frame Plücker normal part to
    /// a homogeneous 2D line in pixel coordinates.
    pub fn line_projection(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.f_v, 0.0, 0.0,
            0.0, self.f_u, 0.0,
            -self.f_v * self.c_u, -self.f_u * self.c_v, self.f_u * self.f_v,
        )
    }
}

/// One point observation in normalized image coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointObservation {
    pub feature_id: u64,
    pub robot_id: usize,
    pub cam_timestamp: f64,
    pub uv_normalized: Vector2<f64>,
}

/// One line-segment observation: homogeneous pixel endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineObservation {
    pub feature_id: u64,
    pub robot_id: usize,
    pub cam_timestamp: f64,
    pub x_s: Vector3<f64>,
    pub x_e: Vector3<f64>,
}

impl LineObservation {
    pub fn segment_length(&self) -> f64 {
        (Vector2::new(self.x_s.x, self.x_s.y) - Vector2::new(self.x_e.x, self.x_e.y)).norm()
    }
}

/// Triangulated feature estimate in the global frame.
#[derive(Debug, Clone)]
pub enum FeatureEstimate {
    Point(Vector3<f64>),
    Line(CPLine),
}

#[derive(Debug, Clone)]
pub struct TriangulatedFeature {
    pub feature_id: u64,
    pub estimate: FeatureEstimate,
}

/// Numeric gates and iteration limits for triangulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriangulationConfig {
    /// Minimum observed segment length in pixels.
    pub min_seg_px: f64,
    /// Accepted band for the origin-to-line distance of a global line.
    pub d_min: f64,
    pub d_max: f64,
    /// Reject when the stacked-plane SVD is too isotropic.
    pub svd_ratio_max: f64,
    /// Minimum relative conditioning before parallax is declared sufficient.
    pub parallax_min: f64,
    /// Minimum camera-frame depth for a point.
    pub z_min: f64,
    pub max_gn_iters: usize,
    pub eps_degenerate: f64,
    /// Maximum rms endpoint distance (px) a refined line may leave behind.
    pub max_line_rms_px: f64,
    /// Minimum information (px²/unit²) about the weakest line DOF.
    pub min_line_information: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            min_seg_px: 50.0,
            d_min: 0.1,
            d_max: 100.0,
            svd_ratio_max: 0.99,
            parallax_min: 1e-6,
            z_min: 0.05,
            max_gn_iters: 5,
            eps_degenerate: 1e-8,
            max_line_rms_px: 10.0,
            min_line_information: 25.0,
        }
    }
}

/// Camera pose in the global frame: `ᶜx = r_gtoc (ᴳx − center)`.
#[derive(Debug, Clone, Copy)]
pub struct CamPose {
    pub r_gtoc: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl CamPose {
    pub fn from_clone(clone_q: &UnitQuaternion, clone_p: &Vector3<f64>, calib: &CalibState) -> Self {
        let r_gtoi = clone_q.to_rotation();
        let r_itoc = calib.q_itoc.to_rotation();
        let r_gtoc = r_itoc * r_gtoi;
        let center = clone_p - r_gtoc.transpose() * calib.p_iinc;
        Self { r_gtoc, center }
    }

    pub fn to_camera(&self, p_g: &Vector3<f64>) -> Vector3<f64> {
        self.r_gtoc * (p_g - self.center)
    }
}

/// Perspective division. Fails for points at or behind the near plane.
pub fn project_point(p_c: &Vector3<f64>, z_min: f64) -> Result<Vector2<f64>> {
    if p_c.z <= z_min {
        return Err(Error::BehindCamera(p_c.z));
    }
    Ok(Vector2::new(p_c.x / p_c.z, p_c.y / p_c.z))
}

/// Global → camera point transform through a cloned pose and the extrinsics.
pub fn point_global_to_camera(
    p_g: &Vector3<f64>,
    clone: &ClonePose,
    calib: &CalibState,
) -> Vector3<f64> {
    let r_gtoi = clone.q_gtoi.to_rotation();
    let r_itoc = calib.q_itoc.to_rotation();
    r_itoc * r_gtoi * (p_g - clone.p_iing) + calib.p_iinc
}

/// Predicted normalized point measurement.
pub fn predict_point(
    p_g: &Vector3<f64>,
    clone: &ClonePose,
    calib: &CalibState,
    z_min: f64,
) -> Result<Vector2<f64>> {
    project_point(&point_global_to_camera(p_g, clone, calib), z_min)
}

/// Analytic Jacobians of the normalized point measurement.
#[derive(Debug, Clone)]
pub struct PointJacobians {
    pub h_theta: Matrix2x3<f64>,
    pub h_pos: Matrix2x3<f64>,
    pub h_calib_theta: Matrix2x3<f64>,
    pub h_calib_pos: Matrix2x3<f64>,
    pub h_feat: Matrix2x3<f64>,
}

/// Jacobians of `Π(ᶜx)` w.r.t. the clone pose error, the extrinsic error,
/// and the global feature position.
///
/// The geometric sensitivity terms are evaluated at `lin` (the FEJ snapshot
/// when FEJ is enabled), while the projection derivative is evaluated at the
/// current predicted camera point `proj`, which keeps the linearized model
/// close to the actual residual.
pub fn point_jacobians(
    p_g: &Vector3<f64>,
    lin: &ClonePose,
    proj: &ClonePose,
    calib: &CalibState,
    z_min: f64,
) -> Result<PointJacobians> {
    let r_gtoi = lin.q_gtoi.to_rotation();
    let r_itoc = calib.q_itoc.to_rotation();
    let p_in_i = r_gtoi * (p_g - lin.p_iing);
    let p_c = point_global_to_camera(p_g, proj, calib);
    if p_c.z <= z_min {
        return Err(Error::BehindCamera(p_c.z));
    }
    let inv_z = 1.0 / p_c.z;
    let d_proj = Matrix2x3::new(
        inv_z, 0.0, -p_c.x * inv_z * inv_z,
        0.0, inv_z, -p_c.y * inv_z * inv_z,
    );
    let d_theta = r_itoc * skew(&p_in_i);
    let d_pos = -(r_itoc * r_gtoi);
    let d_ctheta = skew(&(r_itoc * p_in_i));
    let d_feat = r_itoc * r_gtoi;
    Ok(PointJacobians {
        h_theta: d_proj * d_theta,
        h_pos: d_proj * d_pos,
        h_calib_theta: d_proj * d_ctheta,
        h_calib_pos: d_proj,
        h_feat: d_proj * d_feat,
    })
}

/// Camera-frame Plücker coordinates of a global line, through
/// `ᴳL → ᴵL → ᶜL`.
pub fn line_global_to_camera(
    line_g: &CPLine,
    clone: &ClonePose,
    calib: &CalibState,
) -> (Vector3<f64>, Vector3<f64>) {
    let pl = line_g.to_plucker();
    let r_gtoi = clone.q_gtoi.to_rotation();
    let r_itoc = calib.q_itoc.to_rotation();
    let n_i = r_gtoi * (pl.n - skew(&clone.p_iing) * pl.v);
    let v_i = r_gtoi * pl.v;
    let n_c = r_itoc * n_i + skew(&calib.p_iinc) * r_itoc * v_i;
    let v_c = r_itoc * v_i;
    (n_c, v_c)
}

/// Projects a global line to a homogeneous 2D line in pixel coordinates.
pub fn project_line(
    line_g: &CPLine,
    clone: &ClonePose,
    calib: &CalibState,
    cam: &CameraModel,
) -> Result<Vector3<f64>> {
    let (n_c, _) = line_global_to_camera(line_g, clone, calib);
    let l = cam.line_projection() * n_c;
    if l.x * l.x + l.y * l.y < 1e-12 {
        return Err(Error::DegenerateProjection);
    }
    Ok(l)
}

/// Signed distances of the observed endpoints to the 2D line.
pub fn line_residual(obs: &LineObservation, l: &Vector3<f64>) -> Result<Vector2<f64>> {
    let rho2 = l.x * l.x + l.y * l.y;
    if rho2 < 1e-12 {
        return Err(Error::DegenerateProjection);
    }
    let rho = rho2.sqrt();
    Ok(Vector2::new(obs.x_s.dot(l) / rho, obs.x_e.dot(l) / rho))
}

/// Analytic Jacobians of the line distance measurement.
#[derive(Debug, Clone)]
pub struct LineJacobians {
    pub h_theta: Matrix2x3<f64>,
    pub h_pos: Matrix2x3<f64>,
    pub h_calib_theta: Matrix2x3<f64>,
    pub h_calib_pos: Matrix2x3<f64>,
    pub h_feat: SMatrix<f64, 2, 4>,
}

/// Jacobians of the endpoint-distance measurement w.r.t. the clone pose, the
/// extrinsics, and the 4-DOF closest-point line error.
pub fn line_jacobians(
    line_g: &CPLine,
    obs: &LineObservation,
    lin: &ClonePose,
    proj: &ClonePose,
    calib: &CalibState,
    cam: &CameraModel,
) -> Result<LineJacobians> {
    let pl = line_g.to_plucker();
    let r_gtoi = lin.q_gtoi.to_rotation();
    let r_itoc = calib.q_itoc.to_rotation();

    let n_g = pl.n;
    let v_g = pl.v;
    let n_i = r_gtoi * (n_g - skew(&lin.p_iing) * v_g);
    let v_i = r_gtoi * v_g;

    // normalization point of the distance residual: the currently
    // predicted line
    let (n_c_proj, _) = line_global_to_camera(line_g, proj, calib);
    let l = cam.line_projection() * n_c_proj;
    let rho2 = l.x * l.x + l.y * l.y;
    if rho2 < 1e-12 {
        return Err(Error::DegenerateProjection);
    }
    let rho = rho2.sqrt();

    // d(xᵀl/ρ)/dl for both endpoints
    let mut dr_dl = Matrix2x3::zeros();
    for (row, x) in [(0usize, &obs.x_s), (1usize, &obs.x_e)] {
        let xtl = x.dot(&l);
        let grad = x / rho - (xtl / (rho2 * rho)) * Vector3::new(l.x, l.y, 0.0);
        dr_dl.set_row(row, &grad.transpose());
    }
    let dr_dnc = dr_dl * cam.line_projection();

    // clone orientation (left error on q_GtoI): both n_i and v_i rotate
    let d_nc_dtheta = r_itoc * skew(&n_i) + skew(&calib.p_iinc) * r_itoc * skew(&v_i);
    let d_nc_dpos = r_itoc * r_gtoi * skew(&v_g);
    // calib orientation (left error on q_ItoC) and position
    let d_nc_dctheta = skew(&(r_itoc * n_i)) + skew(&calib.p_iinc) * skew(&(r_itoc * v_i));
    let d_nc_dcpos = -skew(&(r_itoc * v_i));

    // feature error: n_g = d·n_e, v_g = v_e with left δθ_l on q_l
    let r_l = line_g.q.to_rotation();
    let n_e: Vector3<f64> = r_l.column(0).into();
    let v_e: Vector3<f64> = r_l.column(1).into();
    let d_ng_dthetal = line_g.d * skew(&n_e);
    let d_vg_dthetal = skew(&v_e);
    let d_nc_dng = r_itoc * r_gtoi;
    let d_nc_dvg = -(r_itoc * r_gtoi * skew(&lin.p_iing)) + skew(&calib.p_iinc) * r_itoc * r_gtoi;
    let d_nc_dthetal = d_nc_dng * d_ng_dthetal + d_nc_dvg * d_vg_dthetal;
    let d_nc_dd = d_nc_dng * n_e;

    let mut h_feat = SMatrix::<f64, 2, 4>::zeros();
    h_feat.view_mut((0, 0), (2, 3)).copy_from(&(dr_dnc * d_nc_dthetal));
    h_feat.set_column(3, &(dr_dnc * d_nc_dd));

    Ok(LineJacobians {
        h_theta: dr_dnc * d_nc_dtheta,
        h_pos: dr_dnc * d_nc_dpos,
        h_calib_theta: dr_dnc * d_nc_dctheta,
        h_calib_pos: dr_dnc * d_nc_dcpos,
        h_feat,
    })
}

/// Linear DLT followed by a few Gauss-Newton refinement steps on the
/// normalized reprojection error.
pub fn triangulate_point(
    observations: &[(Vector2<f64>, CamPose)],
    cfg: &TriangulationConfig,
) -> Result<Vector3<f64>> {
    if observations.len() < 2 {
        return Err(Error::InsufficientParallax);
    }
    let rows = 2 * observations.len();
    let mut a = nalgebra::DMatrix::zeros(rows, 3);
    let mut b = nalgebra::DVector::zeros(rows);
    for (k, (uv, pose)) in observations.iter().enumerate() {
        let r = &pose.r_gtoc;
        let r1 = r.row(0);
        let r2 = r.row(1);
        let r3 = r.row(2);
        let row_u = r1 - uv.x * r3;
        let row_v = r2 - uv.y * r3;
        a.row_mut(2 * k).copy_from(&row_u);
        a.row_mut(2 * k + 1).copy_from(&row_v);
        b[2 * k] = (row_u * pose.center)[(0, 0)];
        b[2 * k + 1] = (row_v * pose.center)[(0, 0)];
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values[0];
    let smin = svd.singular_values[svd.singular_values.len() - 1];
    if smin / smax < cfg.parallax_min {
        return Err(Error::InsufficientParallax);
    }
    let mut p = svd
        .solve(&b, 0.0)
        .map_err(|_| Error::InsufficientParallax)?
        .fixed_rows::<3>(0)
        .into_owned();

    for _ in 0..cfg.max_gn_iters {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        let mut ok = true;
        for (uv, pose) in observations {
            let p_c = pose.to_camera(&p);
            if p_c.z <= cfg.z_min {
                ok = false;
                break;
            }
            let inv_z = 1.0 / p_c.z;
            let pred = Vector2::new(p_c.x * inv_z, p_c.y * inv_z);
            let d_proj = Matrix2x3::new(
                inv_z, 0.0, -p_c.x * inv_z * inv_z,
                0.0, inv_z, -p_c.y * inv_z * inv_z,
            );
            let j = d_proj * pose.r_gtoc;
            let r = uv - pred;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if !ok {
            break;
        }
        match jtj.cholesky() {
            Some(ch) => {
                let step = ch.solve(&jtr);
                p += step;
                if step.norm() < 1e-12 {
                    break;
                }
            }
            None => break,
        }
    }

    for (_, pose) in observations {
        let z = pose.to_camera(&p).z;
        if z <= cfg.z_min {
            return Err(Error::BehindCamera(z));
        }
    }
    Ok(p)
}

/// Intersects the back-projected planes of the observed segments via SVD of
/// the stacked plane matrix and converts the resulting pencil to a
/// closest-point line.
pub fn triangulate_line(
    observations: &[(&LineObservation, CamPose)],
    cam: &CameraModel,
    cfg: &TriangulationConfig,
) -> Result<CPLine> {
    if observations.len() < 2 {
        return Err(Error::InsufficientParallax);
    }
    let mut w = nalgebra::DMatrix::zeros(observations.len(), 4);
    for (k, (obs, pose)) in observations.iter().enumerate() {
        if obs.segment_length() < cfg.min_seg_px {
            return Err(Error::GateRejected(GateReason::SegmentLength));
        }
        // endpoint bearings span the back-projected plane of the segment
        let bs = Vector3::new(
            (obs.x_s.x - cam.c_u) / cam.f_u,
            (obs.x_s.y - cam.c_v) / cam.f_v,
            1.0,
        );
        let be = Vector3::new(
            (obs.x_e.x - cam.c_u) / cam.f_u,
            (obs.x_e.y - cam.c_v) / cam.f_v,
            1.0,
        );
        let n_cam = bs.cross(&be);
        if n_cam.norm() < cfg.eps_degenerate {
            return Err(Error::DegenerateLine("collapsed segment"));
        }
        let n_g = pose.r_gtoc.transpose() * n_cam;
        let offset = -n_g.dot(&pose.center);
        let norm = (n_g.norm_squared() + offset * offset).sqrt();
        w[(k, 0)] = n_g.x / norm;
        w[(k, 1)] = n_g.y / norm;
        w[(k, 2)] = n_g.z / norm;
        w[(k, 3)] = offset / norm;
    }

    let svd = w.clone().svd(false, false);
    let sv = &svd.singular_values;
    let s1 = sv[0];
    let s2 = if sv.len() > 1 { sv[1] } else { 0.0 };
    let s3 = if sv.len() > 2 { sv[2] } else { 0.0 };
    if s2 / s1 < cfg.parallax_min {
        return Err(Error::InsufficientParallax);
    }
    if s3 / s1 > cfg.svd_ratio_max {
        return Err(Error::GateRejected(GateReason::SvdConditioning));
    }

    // initialize from the pair of back-projected planes with the widest
    // angular separation; near-parallel pairs drown in endpoint noise
    let mut best = (0.0f64, 0usize, 1usize);
    for i in 0..observations.len() {
        let ni = Vector3::new(w[(i, 0)], w[(i, 1)], w[(i, 2)]).normalize();
        for j in (i + 1)..observations.len() {
            let nj = Vector3::new(w[(j, 0)], w[(j, 1)], w[(j, 2)]).normalize();
            let sep = ni.cross(&nj).norm();
            if sep > best.0 {
                best = (sep, i, j);
            }
        }
    }
    if best.0 < cfg.eps_degenerate {
        return Err(Error::InsufficientParallax);
    }
    let (i, j) = (best.1, best.2);
    let n1 = Vector3::new(w[(i, 0)], w[(i, 1)], w[(i, 2)]);
    let n2 = Vector3::new(w[(j, 0)], w[(j, 1)], w[(j, 2)]);
    let dir = n1.cross(&n2);
    if dir.norm() < cfg.eps_degenerate {
        return Err(Error::InsufficientParallax);
    }
    // minimum-norm point on both planes
    let a = nalgebra::DMatrix::from_fn(2, 3, |r, c| if r == 0 { n1[c] } else { n2[c] });
    let b = nalgebra::DVector::from_vec(vec![-w[(i, 3)], -w[(j, 3)]]);
    let p0 = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|_| Error::InsufficientParallax)?
        .fixed_rows::<3>(0)
        .into_owned();
    let mut cp = CPLine::from_plucker(&PluckerLine { n: p0.cross(&dir), v: dir }.normalized()?)?;

    // the two-view intersection ignores most observations; Gauss-Newton on
    // all endpoint distances recovers the maximum-likelihood line
    let info;
    (cp, info) = refine_line(cp, observations, cam, cfg);

    // weak-observability gate: the smallest eigenvalue of the normal matrix
    // is the information (px² per unit error²) about the weakest line DOF
    let min_info = info
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_info < cfg.min_line_information {
        return Err(Error::GateRejected(GateReason::SvdConditioning));
    }

    // discard fits the refinement could not bring down to measurement scale
    let mut rms = 0.0;
    for (obs, pose) in observations {
        let r = line_point_residual(&cp, obs, pose, cam)?;
        rms += r.norm_squared();
    }
    rms = (rms / (2.0 * observations.len() as f64)).sqrt();
    if rms > cfg.max_line_rms_px {
        return Err(Error::GateRejected(GateReason::Reprojection));
    }

    if cp.d < cfg.d_min || cp.d > cfg.d_max {
        return Err(Error::GateRejected(GateReason::OriginDistance));
    }
    Ok(cp)
}

/// Endpoint distances of one observation against a candidate line.
fn line_point_residual(
    line: &CPLine,
    obs: &LineObservation,
    pose: &CamPose,
    cam: &CameraModel,
) -> Result<Vector2<f64>> {
    let pl = line.to_plucker();
    let n_c = pose.r_gtoc * (pl.n - pose.center.cross(&pl.v));
    let l = cam.line_projection() * n_c;
    line_residual(obs, &l)
}

/// Damped Gauss-Newton over the 4-DOF closest-point error, minimizing the
/// summed squared endpoint distances of every observation.
fn refine_line(
    init: CPLine,
    observations: &[(&LineObservation, CamPose)],
    cam: &CameraModel,
    cfg: &TriangulationConfig,
) -> (CPLine, SMatrix<f64, 4, 4>) {
    let k_line = cam.line_projection();
    let eval = |line: &CPLine| -> Option<(f64, SMatrix<f64, 4, 4>, SMatrix<f64, 4, 1>)> {
        let pl = line.to_plucker();
        let r_l = line.q.to_rotation();
        let n_e: Vector3<f64> = r_l.column(0).into();
        let v_e: Vector3<f64> = r_l.column(1).into();
        let mut cost = 0.0;
        let mut jtj = SMatrix::<f64, 4, 4>::zeros();
        let mut jtr = SMatrix::<f64, 4, 1>::zeros();
        for (obs, pose) in observations {
            let r = &pose.r_gtoc;
            let n_c = r * (pl.n - pose.center.cross(&pl.v));
            let l = k_line * n_c;
            let rho2 = l.x * l.x + l.y * l.y;
            if rho2 < 1e-12 {
                return None;
            }
            let rho = rho2.sqrt();
            let res = Vector2::new(obs.x_s.dot(&l) / rho, obs.x_e.dot(&l) / rho);
            cost += res.norm_squared();

            let mut dr_dl = Matrix2x3::zeros();
            for (row, x) in [(0usize, &obs.x_s), (1usize, &obs.x_e)] {
                let xtl = x.dot(&l);
                let grad = x / rho - (xtl / (rho2 * rho)) * Vector3::new(l.x, l.y, 0.0);
                dr_dl.set_row(row, &grad.transpose());
            }
            let dr_dnc = dr_dl * k_line;
            let d_nc_dthetal = r * (line.d * skew(&n_e) - skew(&pose.center) * skew(&v_e));
            let d_nc_dd = r * n_e;
            let mut j = SMatrix::<f64, 2, 4>::zeros();
            j.view_mut((0, 0), (2, 3)).copy_from(&(dr_dnc * d_nc_dthetal));
            j.set_column(3, &(dr_dnc * d_nc_dd));
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        Some((cost, jtj, jtr))
    };

    let mut line = init;
    let Some((mut cost, mut jtj, mut jtr)) = eval(&line) else {
        return (init, SMatrix::zeros());
    };
    let mut lambda = 1e-4;
    for _ in 0..2 * cfg.max_gn_iters {
        let mut damped = jtj;
        for i in 0..4 {
            damped[(i, i)] *= 1.0 + lambda;
        }
        let Some(ch) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let step = ch.solve(&(-jtr));
        let cand = line.boxplus(&CPLineError {
            dtheta: Vector3::new(step[0], step[1], step[2]),
            dd: step[3],
        });
        match eval(&cand) {
            Some((c, njtj, njtr)) if c < cost => {
                line = cand;
                cost = c;
                jtj = njtj;
                jtr = njtr;
                lambda = (lambda * 0.3).max(1e-9);
                if step.norm() < 1e-10 {
                    break;
                }
            }
            _ => {
                lambda *= 10.0;
                if lambda > 1e6 {
                    break;
                }
            }
        }
    }
    (line, jtj)
}

/// One record of the feature-track interchange format (JSON Lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", content = "data")]
pub enum TrackRecordData {
    Point { uv: [f64; 2] },
    Line { xs: [f64; 2], xe: [f64; 2] },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRecord {
    pub feature_id: u64,
    pub robot_id: usize,
    pub t: f64,
    #[serde(flatten)]
    pub data: TrackRecordData,
}

impl TrackRecord {
    pub fn from_point(o: &PointObservation) -> Self {
        Self {
            feature_id: o.feature_id,
            robot_id: o.robot_id,
            t: o.cam_timestamp,
            data: TrackRecordData::Point { uv: [o.uv_normalized.x, o.uv_normalized.y] },
        }
    }

    pub fn from_line(o: &LineObservation) -> Self {
        Self {
            feature_id: o.feature_id,
            robot_id: o.robot_id,
            t: o.cam_timestamp,
            data: TrackRecordData::Line { xs: [o.x_s.x, o.x_s.y], xe: [o.x_e.x, o.x_e.y] },
        }
    }
}

/// Serializes observations to JSON Lines, one record per observation.
pub fn tracks_to_jsonl(points: &[PointObservation], lines: &[LineObservation]) -> Result<String> {
    let mut out = String::new();
    for p in points {
        out.push_str(&serde_json::to_string(&TrackRecord::from_point(p))?);
        out.push('\n');
    }
    for l in lines {
        out.push_str(&serde_json::to_string(&TrackRecord::from_line(l))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses the JSON Lines track format back into observations.
pub fn tracks_from_jsonl(text: &str) -> Result<(Vec<PointObservation>, Vec<LineObservation>)> {
    let mut points = Vec::new();
    let mut lines = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrackRecord = serde_json::from_str(line)?;
        match rec.data {
            TrackRecordData::Point { uv } => points.push(PointObservation {
                feature_id: rec.feature_id,
                robot_id: rec.robot_id,
                cam_timestamp: rec.t,
                uv_normalized: Vector2::new(uv[0], uv[1]),
            }),
            TrackRecordData::Line { xs, xe } => lines.push(LineObservation {
                feature_id: rec.feature_id,
                robot_id: rec.robot_id,
                cam_timestamp: rec.t,
                x_s: Vector3::new(xs[0], xs[1], 1.0),
                x_e: Vector3::new(xe[0], xe[1], 1.0),
            }),
        }
    }
    Ok((points, lines))
}

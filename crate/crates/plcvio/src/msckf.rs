//! Independent per-robot sliding-window update.
//!
//! Each feature's observations are stacked into one linear system
//! `r ≈ H_x x̃ + H_f f̃ + w`, the feature is eliminated by a left nullspace
//! projection (QR of `H_f` applied jointly to the residual and both
//! Jacobians so the noise stays white), and the feature-free bottom blocks of
//! all features drive a single EKF update per frame. The top blocks are
//! retained for the cooperative common-feature update.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::meas::{
    line_jacobians, line_residual, point_jacobians, predict_point, project_line, CameraModel,
    FeatureEstimate, LineObservation, PointObservation, TriangulatedFeature,
};
use crate::state::RobotState;

/// Stacked linearized system of one feature over the window.
#[derive(Debug, Clone)]
pub struct StackedResidual {
    pub feature_id: u64,
    pub r: DVector<f64>,
    pub h_x: DMatrix<f64>,
    pub h_f: DMatrix<f64>,
    /// Measurement noise standard deviation (constant per feature).
    pub sigma: f64,
}

/// Feature-dependent top block kept for the cooperative update.
#[derive(Debug, Clone)]
pub struct TopBlock {
    pub r1: DVector<f64>,
    pub h_x1: DMatrix<f64>,
    pub h_f1: DMatrix<f64>,
}

/// Feature-free bottom block used for the independent EKF update.
#[derive(Debug, Clone)]
pub struct BottomBlock {
    pub r2: DVector<f64>,
    pub h_x2: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ProjectedResidual {
    pub feature_id: u64,
    pub top: TopBlock,
    pub bottom: BottomBlock,
    pub sigma: f64,
}

/// Options controlling Jacobian evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LinearizationOptions {
    /// Evaluate clone-pose Jacobians at the first-estimate snapshots.
    pub fej: bool,
    /// Fill the extrinsic-calibration columns (online calibration).
    pub estimate_calib: bool,
    /// Tolerance when matching an observation time to a clone.
    pub time_tol: f64,
}

impl Default for LinearizationOptions {
    fn default() -> Self {
        Self { fej: true, estimate_calib: true, time_tol: 1e-6 }
    }
}

/// Builds the stacked system of a point feature from its window observations.
pub fn stack_point_feature(
    state: &RobotState,
    feature: &TriangulatedFeature,
    track: &[PointObservation],
    cam: &CameraModel,
    opts: &LinearizationOptions,
) -> Result<StackedResidual> {
    let FeatureEstimate::Point(p_g) = &feature.estimate else {
        return Err(Error::FeatureMismatch(feature.feature_id, 0));
    };
    let layout = state.layout();
    let dim = layout.dim();
    let k = track.len();
    let mut r = DVector::zeros(2 * k);
    let mut h_x = DMatrix::zeros(2 * k, dim);
    let mut h_f = DMatrix::zeros(2 * k, 3);

    for (i, obs) in track.iter().enumerate() {
        let t_imu = obs.cam_timestamp - state.t_d;
        let ci = state
            .find_clone(t_imu, opts.time_tol)
            .ok_or(Error::MissingClone(t_imu))?;
        let clone = &state.clones[ci];
        let lin = if opts.fej { &state.fej_values[ci] } else { clone };

        let pred = predict_point(p_g, clone, &state.calib, 1e-4)?;
        let jac = point_jacobians(p_g, lin, clone, &state.calib, 1e-4)?;

        let row = 2 * i;
        r[row] = obs.uv_normalized.x - pred.x;
        r[row + 1] = obs.uv_normalized.y - pred.y;
        let off = layout.clone(ci);
        h_x.view_mut((row, off), (2, 3)).copy_from(&jac.h_theta);
        h_x.view_mut((row, off + 3), (2, 3)).copy_from(&jac.h_pos);
        if opts.estimate_calib {
            h_x.view_mut((row, layout.calib_theta()), (2, 3)).copy_from(&jac.h_calib_theta);
            h_x.view_mut((row, layout.calib_pos()), (2, 3)).copy_from(&jac.h_calib_pos);
        }
        h_f.view_mut((row, 0), (2, 3)).copy_from(&jac.h_feat);
    }
    Ok(StackedResidual { feature_id: feature.feature_id, r, h_x, h_f, sigma: cam.sigma_norm() })
}

/// Builds the stacked system of a line feature from its window observations.
pub fn stack_line_feature(
    state: &RobotState,
    feature: &TriangulatedFeature,
    track: &[LineObservation],
    cam: &CameraModel,
    opts: &LinearizationOptions,
) -> Result<StackedResidual> {
    let FeatureEstimate::Line(line_g) = &feature.estimate else {
        return Err(Error::FeatureMismatch(feature.feature_id, 0));
    };
    let layout = state.layout();
    let dim = layout.dim();
    let k = track.len();
    let mut r = DVector::zeros(2 * k);
    let mut h_x = DMatrix::zeros(2 * k, dim);
    let mut h_f = DMatrix::zeros(2 * k, 4);

    for (i, obs) in track.iter().enumerate() {
        let t_imu = obs.cam_timestamp - state.t_d;
        let ci = state
            .find_clone(t_imu, opts.time_tol)
            .ok_or(Error::MissingClone(t_imu))?;
        let clone = &state.clones[ci];
        let lin = if opts.fej { &state.fej_values[ci] } else { clone };

        // distances are an implicit measurement with expectation zero, so the
        // residual is the negated evaluation at the current estimate
        let l = project_line(line_g, clone, &state.calib, cam)?;
        let dist = line_residual(obs, &l)?;
        let jac = line_jacobians(line_g, obs, lin, clone, &state.calib, cam)?;

        let row = 2 * i;
        r[row] = -dist.x;
        r[row + 1] = -dist.y;
        let off = layout.clone(ci);
        h_x.view_mut((row, off), (2, 3)).copy_from(&jac.h_theta);
        h_x.view_mut((row, off + 3), (2, 3)).copy_from(&jac.h_pos);
        if opts.estimate_calib {
            h_x.view_mut((row, layout.calib_theta()), (2, 3)).copy_from(&jac.h_calib_theta);
            h_x.view_mut((row, layout.calib_pos()), (2, 3)).copy_from(&jac.h_calib_pos);
        }
        h_f.view_mut((row, 0), (2, 4)).copy_from(&jac.h_feat);
    }
    Ok(StackedResidual { feature_id: feature.feature_id, r, h_x, h_f, sigma: cam.sigma_px })
}

/// Left nullspace projection by QR of the feature Jacobian, applied jointly
/// to `(r, H_x)` so the transformed noise stays white.
///
/// The top `d` rows keep the feature dependence (upper-triangular `H_f`
/// block); the remaining `2k − d` rows are independent of the feature.
pub fn nullspace_project(s: &StackedResidual) -> Result<ProjectedResidual> {
    let rows = s.r.len();
    let d = s.h_f.ncols();
    if rows <= d {
        return Err(Error::RankDeficientFeature);
    }
    let qr = s.h_f.clone().qr();
    let r_factor = qr.r();
    let max_diag = (0..d).map(|i| r_factor[(i, i)].abs()).fold(0.0, f64::max);
    if max_diag <= 0.0 {
        return Err(Error::RankDeficientFeature);
    }
    for i in 0..d {
        if r_factor[(i, i)].abs() < 1e-8 * max_diag {
            return Err(Error::RankDeficientFeature);
        }
    }

    let mut rf = DMatrix::zeros(rows, 1 + s.h_x.ncols() + d);
    rf.view_mut((0, 0), (rows, 1)).copy_from(&s.r);
    rf.view_mut((0, 1), (rows, s.h_x.ncols())).copy_from(&s.h_x);
    rf.view_mut((0, 1 + s.h_x.ncols()), (rows, d)).copy_from(&s.h_f);
    qr.q_tr_mul(&mut rf);

    let split = |r0: usize, nr: usize| -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let r = rf.view((r0, 0), (nr, 1)).column(0).clone_owned();
        let hx = rf.view((r0, 1), (nr, s.h_x.ncols())).clone_owned();
        let hf = rf.view((r0, 1 + s.h_x.ncols()), (nr, d)).clone_owned();
        (r, hx, hf)
    };
    let (r1, h_x1, h_f1) = split(0, d);
    let (r2, h_x2, _h_f2) = split(d, rows - d);

    Ok(ProjectedResidual {
        feature_id: s.feature_id,
        top: TopBlock { r1, h_x1, h_f1 },
        bottom: BottomBlock { r2, h_x2 },
        sigma: s.sigma,
    })
}

/// 95% chi-squared quantile via the Wilson-Hilferty approximation.
pub fn chi2_quantile_95(dim: usize) -> f64 {
    let k = dim as f64;
    let z = 1.6448536269514722;
    let t = 1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt();
    k * t * t * t
}

/// Mahalanobis gate of one projected bottom block against the current state.
pub fn chi2_gate(state: &RobotState, bottom: &BottomBlock, sigma: f64) -> bool {
    let rows = bottom.r2.len();
    if rows == 0 {
        return false;
    }
    let hp = &bottom.h_x2 * &state.cov;
    let mut s = &hp * bottom.h_x2.transpose();
    for i in 0..rows {
        s[(i, i)] += sigma * sigma;
    }
    let Some(ch) = s.cholesky() else { return false };
    let sol = ch.solve(&bottom.r2);
    let gamma = bottom.r2.dot(&sol);
    gamma < chi2_quantile_95(rows)
}

/// Statistics of one independent update.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateOutcome {
    pub features_used: usize,
    pub features_gated: usize,
    pub rows_used: usize,
}

/// Standard EKF update with a stack of rows.
///
/// `blocks` are `(r, H, sigma)` triples; rows are whitened by `1/sigma`, so
/// the stacked measurement noise is the identity. When the stack is taller
/// than the state it is compressed by a thin QR first.
pub fn ekf_update(state: &mut RobotState, blocks: &[(DVector<f64>, DMatrix<f64>, f64)]) -> Result<()> {
    let dim = state.err_dim();
    let total_rows: usize = blocks.iter().map(|(r, _, _)| r.len()).sum();
    if total_rows == 0 {
        return Ok(());
    }
    let mut big = DMatrix::zeros(total_rows, dim + 1);
    let mut row = 0;
    for (r, h, sigma) in blocks {
        if h.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: h.ncols() });
        }
        let w = 1.0 / sigma;
        for i in 0..r.len() {
            big[(row + i, 0)] = r[i] * w;
            for j in 0..dim {
                big[(row + i, j + 1)] = h[(i, j)] * w;
            }
        }
        row += r.len();
    }

    // compress tall stacks: QR on (H | r) keeps the information and the
    // identity noise
    let (r_vec, h_mat) = if total_rows > dim {
        let qr = big.view((0, 1), (total_rows, dim)).clone_owned().qr();
        let mut rhs = big.view((0, 0), (total_rows, 1)).clone_owned();
        qr.q_tr_mul(&mut rhs);
        let keep = dim.min(total_rows);
        (
            rhs.view((0, 0), (keep, 1)).column(0).clone_owned(),
            qr.r().view((0, 0), (keep, dim)).clone_owned(),
        )
    } else {
        (
            big.view((0, 0), (total_rows, 1)).column(0).clone_owned(),
            big.view((0, 1), (total_rows, dim)).clone_owned(),
        )
    };

    let rows = r_vec.len();
    let hp = &h_mat * &state.cov;
    let mut s = &hp * h_mat.transpose();
    for i in 0..rows {
        s[(i, i)] += 1.0;
    }
    let ch = s.cholesky().ok_or(Error::SingularInnovation(f64::INFINITY))?;
    // K = P Hᵀ S⁻¹ via a solve on H P
    let k = ch.solve(&hp).transpose();
    let dx = &k * &r_vec;

    // Joseph form with identity measurement noise
    let ikh = DMatrix::identity(dim, dim) - &k * &h_mat;
    state.cov = &ikh * &state.cov * ikh.transpose() + &k * k.transpose();
    state.symmetrize();
    state.apply_correction(&dx)?;
    state.check_psd(1e-9)?;
    Ok(())
}

/// Performs the independent EKF update from a set of projected residuals,
/// chi-squared gating each feature. Gate failures drop features, never abort.
pub fn independent_update(
    state: &mut RobotState,
    projected: &[ProjectedResidual],
) -> Result<UpdateOutcome> {
    let mut outcome = UpdateOutcome::default();
    let mut blocks = Vec::new();
    for p in projected {
        if chi2_gate(state, &p.bottom, p.sigma) {
            outcome.features_used += 1;
            outcome.rows_used += p.bottom.r2.len();
            blocks.push((p.bottom.r2.clone(), p.bottom.h_x2.clone(), p.sigma));
        } else {
            outcome.features_gated += 1;
        }
    }
    ekf_update(state, &blocks)?;
    Ok(outcome)
}

/// Error-state columns that a Jacobian block actually touches.
pub fn touched_columns(h: &DMatrix<f64>) -> Vec<usize> {
    (0..h.ncols())
        .filter(|&j| (0..h.nrows()).any(|i| h[(i, j)] != 0.0))
        .collect()
}

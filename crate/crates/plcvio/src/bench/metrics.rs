//! Trajectory error metrics: absolute RMSE, relative pose errors over
//! fixed path-length segments, and estimation-error statistics.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::UnitQuaternion;

/// Timestamped pose series: `(t, q_GtoI, p_IinG)`.
pub type PoseSeries = Vec<(f64, UnitQuaternion, Vector3<f64>)>;

/// Orientation RMSE (degrees) from the angle of `R_estᵀ R_true`, and
/// Euclidean position RMSE (meters).
pub fn rmse(est: &PoseSeries, truth: &PoseSeries) -> Result<(f64, f64)> {
    if est.len() != truth.len() {
        return Err(Error::LengthMismatch(est.len(), truth.len()));
    }
    if est.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut sum_ang = 0.0;
    let mut sum_pos = 0.0;
    for ((_, qe, pe), (_, qt, pt)) in est.iter().zip(truth.iter()) {
        let ang = qe.multiply(&qt.inverse()).angle();
        sum_ang += ang * ang;
        sum_pos += (pe - pt).norm_squared();
    }
    let n = est.len() as f64;
    Ok(((sum_ang / n).sqrt().to_degrees(), (sum_pos / n).sqrt()))
}

/// Relative pose error statistics over one segment length.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SegmentError {
    pub length: f64,
    pub count: usize,
    pub mean_roe_deg: f64,
    pub mean_rpe_m: f64,
}

pub fn default_segment_lengths() -> Vec<f64> {
    vec![8.0, 16.0, 24.0, 32.0, 40.0, 48.0]
}

/// Relative orientation/position errors over sliding segments whose
/// ground-truth path length reaches each configured length.
pub fn relative_errors(
    est: &PoseSeries,
    truth: &PoseSeries,
    lengths: &[f64],
) -> Result<Vec<SegmentError>> {
    if est.len() != truth.len() {
        return Err(Error::LengthMismatch(est.len(), truth.len()));
    }
    // cumulative ground-truth path length
    let mut cum = Vec::with_capacity(truth.len());
    let mut acc = 0.0;
    for (i, (_, _, p)) in truth.iter().enumerate() {
        if i > 0 {
            acc += (p - truth[i - 1].2).norm();
        }
        cum.push(acc);
    }

    let rel = |series: &PoseSeries, i: usize, j: usize| -> (nalgebra::Matrix3<f64>, Vector3<f64>) {
        let (_, qi, pi) = &series[i];
        let (_, qj, pj) = &series[j];
        // body_i frame transform: R = R_ItoG_iᵀ R_ItoG_j, t = R_GtoI_i (p_j − p_i)
        let r_i = qi.to_rotation();
        let r_j = qj.to_rotation();
        (r_i * r_j.transpose(), r_i * (pj - pi))
    };

    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut sum_roe = 0.0;
        let mut sum_rpe = 0.0;
        let mut count = 0usize;
        let mut j = 0usize;
        for i in 0..truth.len() {
            while j < truth.len() && cum[j] - cum[i] < len {
                j += 1;
            }
            if j >= truth.len() {
                break;
            }
            let (r_gt, t_gt) = rel(truth, i, j);
            let (r_est, t_est) = rel(est, i, j);
            let err_r = r_gt.transpose() * r_est;
            let roe = UnitQuaternion::from_rotation(&err_r).angle();
            sum_roe += roe.to_degrees();
            sum_rpe += (t_est - t_gt).norm();
            count += 1;
        }
        out.push(SegmentError {
            length: len,
            count,
            mean_roe_deg: if count > 0 { sum_roe / count as f64 } else { 0.0 },
            mean_rpe_m: if count > 0 { sum_rpe / count as f64 } else { 0.0 },
        });
    }
    Ok(out)
}

/// Mean of a series ignoring non-finite entries.
pub fn mean_finite(series: &[f64]) -> f64 {
    let vals: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn series_line(n: usize, step: f64) -> PoseSeries {
        (0..n)
            .map(|i| {
                (
                    i as f64,
                    UnitQuaternion::identity(),
                    Vector3::new(step * i as f64, 0.0, 0.0),
                )
            })
            .collect()
    }

    #[test]
    fn identical_series_zero_error() {
        let s = series_line(50, 0.5);
        let (deg, m) = rmse(&s, &s).unwrap();
        assert_eq!(deg, 0.0);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn constant_offset_position_rmse() {
        let truth = series_line(50, 0.5);
        let est: PoseSeries = truth
            .iter()
            .map(|(t, q, p)| (*t, *q, p + Vector3::new(0.1, 0.0, 0.0)))
            .collect();
        let (deg, m) = rmse(&est, &truth).unwrap();
        assert_relative_eq!(m, 0.1, epsilon = 1e-12);
        assert_eq!(deg, 0.0);
    }

    #[test]
    fn hand_built_three_pose_toy() {
        // known rotations about z: 0, 10, 20 degrees error
        let truth: PoseSeries = (0..3)
            .map(|i| (i as f64, UnitQuaternion::identity(), Vector3::zeros()))
            .collect();
        let est: PoseSeries = (0..3)
            .map(|i| {
                let ang = (10.0 * i as f64).to_radians();
                (
                    i as f64,
                    UnitQuaternion::from_axis_angle(&Vector3::z(), ang),
                    Vector3::new(0.0, 0.1 * i as f64, 0.0),
                )
            })
            .collect();
        let (deg, m) = rmse(&est, &truth).unwrap();
        let expect_deg = ((0.0f64 + 100.0 + 400.0) / 3.0).sqrt();
        let expect_m = ((0.0f64 + 0.01 + 0.04) / 3.0).sqrt();
        assert_relative_eq!(deg, expect_deg, epsilon = 1e-9);
        assert_relative_eq!(m, expect_m, epsilon = 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = series_line(5, 1.0);
        let b = series_line(6, 1.0);
        assert!(matches!(rmse(&a, &b), Err(Error::LengthMismatch(5, 6))));
    }

    #[test]
    fn relative_errors_on_drifting_estimate() {
        // truth walks 0.5 m per frame; estimate accumulates 1% scale drift
        let truth = series_line(200, 0.5);
        let est: PoseSeries = truth
            .iter()
            .map(|(t, q, p)| (*t, *q, p * 1.01))
            .collect();
        let segs = relative_errors(&est, &truth, &[8.0, 16.0]).unwrap();
        assert_eq!(segs.len(), 2);
        assert!(segs[0].count > 0);
        // 1% of 8 m and 16 m respectively
        assert_relative_eq!(segs[0].mean_rpe_m, 0.08, epsilon = 1e-2);
        assert_relative_eq!(segs[1].mean_rpe_m, 0.16, epsilon = 1e-2);
        assert!(segs.iter().all(|s| s.mean_roe_deg.abs() < 1e-9));
    }
}

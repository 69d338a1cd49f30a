//! Per-robot filter state: IMU state, camera-IMU extrinsics, the sliding
//! window of cloned poses, the camera-IMU time offset, and the covariance
//! over the corresponding error state.
//!
//! The error state is laid out as
//!
//! ```text
//! [ δθ δp δv δbg δba | δθ_c δp_c | clone_0 (δθ δp) ... clone_{m-1} | δt_d ]
//! ```
//!
//! and [`StateLayout`] is the single authority mapping block names to offsets.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::UnitQuaternion;

pub const IMU_ERR_DIM: usize = 15;
pub const CALIB_ERR_DIM: usize = 6;
pub const CLONE_ERR_DIM: usize = 6;

/// IMU state: orientation (global→IMU), position, velocity, gyro and
/// accelerometer biases. 15-dimensional error state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImuState {
    #[serde(rename = "q_GtoI")]
    pub q_gtoi: UnitQuaternion,
    #[serde(rename = "p_IinG")]
    pub p_iing: Vector3<f64>,
    #[serde(rename = "v_IinG")]
    pub v_iing: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

impl Default for ImuState {
    fn default() -> Self {
        Self {
            q_gtoi: UnitQuaternion::identity(),
            p_iing: Vector3::zeros(),
            v_iing: Vector3::zeros(),
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }
}

/// Rigid camera-IMU extrinsics. 6-dimensional error state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibState {
    #[serde(rename = "q_ItoC")]
    pub q_itoc: UnitQuaternion,
    #[serde(rename = "p_IinC")]
    pub p_iinc: Vector3<f64>,
}

impl Default for CalibState {
    fn default() -> Self {
        Self { q_itoc: UnitQuaternion::identity(), p_iinc: Vector3::zeros() }
    }
}

/// One cloned IMU pose in the sliding window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClonePose {
    pub timestamp: f64,
    #[serde(rename = "q_GtoI")]
    pub q_gtoi: UnitQuaternion,
    #[serde(rename = "p_IinG")]
    pub p_iing: Vector3<f64>,
}

/// Offsets of every error-state block. All modules obtain indices from here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub num_clones: usize,
}

impl StateLayout {
    pub fn theta(&self) -> usize {
        0
    }
    pub fn pos(&self) -> usize {
        3
    }
    pub fn vel(&self) -> usize {
        6
    }
    pub fn bg(&self) -> usize {
        9
    }
    pub fn ba(&self) -> usize {
        12
    }
    pub fn calib_theta(&self) -> usize {
        IMU_ERR_DIM
    }
    pub fn calib_pos(&self) -> usize {
        IMU_ERR_DIM + 3
    }
    pub fn clone(&self, idx: usize) -> usize {
        debug_assert!(idx < self.num_clones);
        IMU_ERR_DIM + CALIB_ERR_DIM + CLONE_ERR_DIM * idx
    }
    pub fn td(&self) -> usize {
        IMU_ERR_DIM + CALIB_ERR_DIM + CLONE_ERR_DIM * self.num_clones
    }
    pub fn dim(&self) -> usize {
        self.td() + 1
    }
}

/// Full state of one robot's filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotState {
    pub robot_id: usize,
    pub imu: ImuState,
    pub calib: CalibState,
    pub clones: Vec<ClonePose>,
    pub t_d: f64,
    pub cov: DMatrix<f64>,
    /// First-estimate snapshots of the clone poses, written once at cloning
    /// time and never modified by corrections.
    pub fej_values: Vec<ClonePose>,
    pub max_clones: usize,
}

impl RobotState {
    /// Creates a state with no clones and a diagonal covariance over the
    /// 22-dimensional base error state (IMU + calib + t_d).
    pub fn new(
        robot_id: usize,
        imu: ImuState,
        calib: CalibState,
        t_d: f64,
        base_diag: &[f64],
        max_clones: usize,
    ) -> Self {
        let layout = StateLayout { num_clones: 0 };
        assert_eq!(base_diag.len(), layout.dim(), "base covariance diagonal must cover IMU+calib+t_d");
        let mut cov = DMatrix::zeros(layout.dim(), layout.dim());
        for (i, &d) in base_diag.iter().enumerate() {
            cov[(i, i)] = d;
        }
        Self { robot_id, imu, calib, clones: Vec::new(), t_d, cov, fej_values: Vec::new(), max_clones }
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout { num_clones: self.clones.len() }
    }

    pub fn err_dim(&self) -> usize {
        self.layout().dim()
    }

    /// Index of the clone matching `t` within `tol`, if any.
    pub fn find_clone(&self, t: f64, tol: f64) -> Option<usize> {
        self.clones.iter().position(|c| (c.timestamp - t).abs() <= tol)
    }

    /// Stochastic cloning: appends a copy of the current IMU pose to the
    /// window and augments the covariance with identity-Jacobian rows and
    /// columns for the new block.
    ///
    /// The window may hold `max_clones + 1` poses transiently between the
    /// clone and the post-update marginalization; a second clone without an
    /// intervening marginalization is refused.
    pub fn clone_at(&mut self, t_imu: f64) -> Result<()> {
        if let Some(last) = self.clones.last() {
            if t_imu <= last.timestamp {
                return Err(Error::NonMonotonicTime(t_imu));
            }
        }
        if self.clones.len() > self.max_clones {
            return Err(Error::WindowFull(self.clones.len()));
        }
        let old_layout = self.layout();
        let old_dim = old_layout.dim();
        let new_layout = StateLayout { num_clones: old_layout.num_clones + 1 };
        let new_dim = new_layout.dim();
        let insert_at = new_layout.clone(old_layout.num_clones);

        // old index -> new index (t_d shifts past the inserted block)
        let map = |i: usize| if i < insert_at { i } else { i + CLONE_ERR_DIM };
        // new clone error = (δθ, δp) of the current IMU state
        let src = [0usize, 1, 2, 3, 4, 5];

        let mut cov = DMatrix::zeros(new_dim, new_dim);
        for i in 0..old_dim {
            for j in 0..old_dim {
                cov[(map(i), map(j))] = self.cov[(i, j)];
            }
        }
        for (r, &sr) in src.iter().enumerate() {
            for j in 0..old_dim {
                cov[(insert_at + r, map(j))] = self.cov[(sr, j)];
                cov[(map(j), insert_at + r)] = self.cov[(j, sr)];
            }
            for (c, &sc) in src.iter().enumerate() {
                cov[(insert_at + r, insert_at + c)] = self.cov[(sr, sc)];
            }
        }
        self.cov = cov;

        let pose = ClonePose { timestamp: t_imu, q_gtoi: self.imu.q_gtoi, p_iing: self.imu.p_iing };
        self.clones.push(pose.clone());
        self.fej_values.push(pose);
        Ok(())
    }

    /// Drops the oldest clone; the covariance shrinks to the corresponding
    /// principal submatrix.
    pub fn marginalize_oldest(&mut self) -> Result<()> {
        if self.clones.is_empty() {
            return Err(Error::EmptyWindow);
        }
        let old_layout = self.layout();
        let start = old_layout.clone(0);
        let old_dim = old_layout.dim();
        let new_dim = old_dim - CLONE_ERR_DIM;
        let map = |i: usize| if i < start { i } else { i + CLONE_ERR_DIM };

        let mut cov = DMatrix::zeros(new_dim, new_dim);
        for i in 0..new_dim {
            for j in 0..new_dim {
                cov[(i, j)] = self.cov[(map(i), map(j))];
            }
        }
        self.cov = cov;
        self.clones.remove(0);
        self.fej_values.remove(0);
        Ok(())
    }

    /// Applies an error-state correction: quaternions multiplicatively on the
    /// left, vector states additively. FEJ snapshots are untouched.
    pub fn apply_correction(&mut self, dx: &DVector<f64>) -> Result<()> {
        let layout = self.layout();
        if dx.len() != layout.dim() {
            return Err(Error::DimensionMismatch { expected: layout.dim(), got: dx.len() });
        }
        let seg = |off: usize| Vector3::new(dx[off], dx[off + 1], dx[off + 2]);

        self.imu.q_gtoi = UnitQuaternion::small_angle(&seg(layout.theta())).multiply(&self.imu.q_gtoi);
        self.imu.p_iing += seg(layout.pos());
        self.imu.v_iing += seg(layout.vel());
        self.imu.bg += seg(layout.bg());
        self.imu.ba += seg(layout.ba());
        self.calib.q_itoc = UnitQuaternion::small_angle(&seg(layout.calib_theta())).multiply(&self.calib.q_itoc);
        self.calib.p_iinc += seg(layout.calib_pos());
        for (idx, clone) in self.clones.iter_mut().enumerate() {
            let off = layout.clone(idx);
            clone.q_gtoi = UnitQuaternion::small_angle(&seg(off)).multiply(&clone.q_gtoi);
            clone.p_iing += seg(off + 3);
        }
        self.t_d += dx[layout.td()];
        Ok(())
    }

    /// Re-symmetrizes the covariance in place.
    pub fn symmetrize(&mut self) {
        let n = self.cov.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.cov[(i, j)] + self.cov[(j, i)]);
                self.cov[(i, j)] = m;
                self.cov[(j, i)] = m;
            }
        }
    }

    /// Fails with [`Error::Consistency`] if the covariance has an eigenvalue
    /// below `-tol`.
    pub fn check_psd(&self, tol: f64) -> Result<()> {
        let shifted = &self.cov + DMatrix::identity(self.cov.nrows(), self.cov.ncols()) * tol;
        if shifted.cholesky().is_some() {
            return Ok(());
        }
        let min_eig = self
            .cov
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        Err(Error::Consistency(min_eig))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn base_diag() -> Vec<f64> {
        (0..StateLayout { num_clones: 0 }.dim()).map(|i| 0.1 + 0.01 * i as f64).collect()
    }

    fn test_state() -> RobotState {
        let mut imu = ImuState::default();
        imu.p_iing = Vector3::new(1.0, 2.0, 3.0);
        imu.v_iing = Vector3::new(0.1, 0.2, 0.3);
        RobotState::new(0, imu, CalibState::default(), 0.0, &base_diag(), 11)
    }

    fn random_spd_update(state: &mut RobotState, rng: &mut ChaCha8Rng) {
        // random symmetric PSD "update" keeps the matrix within PSD land
        let n = state.err_dim();
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.01..0.01));
        let delta = &a * a.transpose();
        state.cov += delta;
        state.symmetrize();
    }

    #[test]
    fn layout_offsets_cover_dimension() {
        let l = StateLayout { num_clones: 3 };
        assert_eq!(l.theta(), 0);
        assert_eq!(l.pos(), 3);
        assert_eq!(l.vel(), 6);
        assert_eq!(l.bg(), 9);
        assert_eq!(l.ba(), 12);
        assert_eq!(l.calib_theta(), 15);
        assert_eq!(l.calib_pos(), 18);
        assert_eq!(l.clone(0), 21);
        assert_eq!(l.clone(2), 33);
        assert_eq!(l.td(), 39);
        assert_eq!(l.dim(), 15 + 6 + 6 * 3 + 1);
    }

    #[test]
    fn clone_augments_covariance_with_identity_jacobian() {
        let mut s = test_state();
        assert_eq!(s.err_dim(), 22);
        s.clone_at(1.0).unwrap();
        assert_eq!(s.err_dim(), 28);
        let l = s.layout();
        // new diagonal block equals current pose block
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(s.cov[(l.clone(0) + i, l.clone(0) + j)], s.cov[(i, j)]);
            }
        }
        assert_eq!(s.clones[0].p_iing, s.imu.p_iing);
    }

    #[test]
    fn clone_same_timestamp_rejected() {
        let mut s = test_state();
        s.clone_at(1.0).unwrap();
        assert!(matches!(s.clone_at(1.0), Err(Error::NonMonotonicTime(_))));
    }

    #[test]
    fn clone_without_marginalize_hits_window_limit() {
        let mut s = test_state();
        s.max_clones = 2;
        s.clone_at(1.0).unwrap();
        s.clone_at(2.0).unwrap();
        s.clone_at(3.0).unwrap();
        assert!(matches!(s.clone_at(4.0), Err(Error::WindowFull(_))));
    }

    #[test]
    fn clone_cross_covariance_matches_direct_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = test_state();
        random_spd_update(&mut s, &mut rng);
        let before = s.cov.clone();
        s.clone_at(0.5).unwrap();
        let l = s.layout();
        // direct construction: J stacks identity rows for (theta, pos)
        let old_dim = before.nrows();
        let mut j = DMatrix::zeros(old_dim + 6, old_dim);
        for i in 0..old_dim {
            j[(i_map(i, l), i)] = 1.0;
        }
        for r in 0..6 {
            j[(l.clone(0) + r, r)] = 1.0;
        }
        let expected = &j * &before * j.transpose();
        assert_relative_eq!(s.cov, expected, epsilon = 1e-12);
        // cross-covariance of clone with IMU velocity equals pre-clone pose/vel cross block
        for r in 0..6 {
            for c in 0..3 {
                assert_eq!(s.cov[(l.clone(0) + r, l.vel() + c)], before[(r, 6 + c)]);
            }
        }
    }

    fn i_map(i: usize, l: StateLayout) -> usize {
        let insert = l.clone(l.num_clones - 1);
        if i < insert {
            i
        } else {
            i + 6
        }
    }

    #[test]
    fn marginalize_restores_dimension_and_blocks() {
        let mut s = test_state();
        s.clone_at(1.0).unwrap();
        let with_one = s.clone();
        s.clone_at(2.0).unwrap();
        assert_eq!(s.err_dim(), 34);
        s.marginalize_oldest().unwrap();
        assert_eq!(s.err_dim(), 28);
        // the surviving clone is the second one
        assert_eq!(s.clones[0].timestamp, 2.0);
        // base blocks bit-identical to the single-clone state
        for i in 0..21 {
            for j in 0..21 {
                assert_eq!(s.cov[(i, j)], with_one.cov[(i, j)]);
            }
        }
        let mut empty = test_state();
        assert!(matches!(empty.marginalize_oldest(), Err(Error::EmptyWindow)));
    }

    #[test]
    fn marginalize_eigenvalues_interlace() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut s = test_state();
        s.clone_at(1.0).unwrap();
        random_spd_update(&mut s, &mut rng);
        let full = s.cov.clone();
        s.marginalize_oldest().unwrap();
        let mut full_eigs: Vec<f64> = full.symmetric_eigen().eigenvalues.iter().cloned().collect();
        let mut sub_eigs: Vec<f64> = s.cov.clone().symmetric_eigen().eigenvalues.iter().cloned().collect();
        full_eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sub_eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Cauchy interlacing: lambda_k(full) <= lambda_k(sub) <= lambda_{k+6}(full)
        let k = 6;
        for (i, &se) in sub_eigs.iter().enumerate() {
            assert!(full_eigs[i] <= se + 1e-10);
            assert!(se <= full_eigs[i + k] + 1e-10);
        }
    }

    #[test]
    fn apply_correction_zero_is_identity() {
        let mut s = test_state();
        s.clone_at(1.0).unwrap();
        let before = s.clone();
        let dx = DVector::zeros(s.err_dim());
        s.apply_correction(&dx).unwrap();
        assert_eq!(s.imu.q_gtoi, before.imu.q_gtoi);
        assert_eq!(s.imu.p_iing, before.imu.p_iing);
        assert_eq!(s.clones[0].p_iing, before.clones[0].p_iing);
    }

    #[test]
    fn apply_correction_orientation_only() {
        let mut s = test_state();
        let before = s.clone();
        let mut dx = DVector::zeros(s.err_dim());
        dx[0] = 1e-3;
        s.apply_correction(&dx).unwrap();
        let expected = UnitQuaternion::small_angle(&Vector3::new(1e-3, 0.0, 0.0))
            .multiply(&before.imu.q_gtoi);
        assert_eq!(s.imu.q_gtoi, expected);
        assert_eq!(s.imu.p_iing, before.imu.p_iing);
        assert_eq!(s.imu.v_iing, before.imu.v_iing);
        assert_eq!(s.imu.bg, before.imu.bg);
    }

    #[test]
    fn apply_correction_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut s = test_state();
        s.clone_at(1.0).unwrap();
        let before = s.clone();
        let dx = DVector::from_fn(s.err_dim(), |_, _| rng.random_range(-1e-3..1e-3));
        s.apply_correction(&dx).unwrap();
        s.apply_correction(&(-&dx)).unwrap();
        assert!((s.imu.q_gtoi.as_vector4() - before.imu.q_gtoi.as_vector4()).norm() < 1e-9);
        assert!((s.imu.p_iing - before.imu.p_iing).norm() < 1e-9);
        assert!((s.t_d - before.t_d).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut s = test_state();
        let dx = DVector::zeros(5);
        assert!(matches!(s.apply_correction(&dx), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn fej_values_write_once() {
        let mut s = test_state();
        s.clone_at(1.0).unwrap();
        let snap = s.fej_values[0].clone();
        let mut dx = DVector::zeros(s.err_dim());
        let l = s.layout();
        dx[l.clone(0)] = 1e-2;
        dx[l.clone(0) + 3] = 0.5;
        s.apply_correction(&dx).unwrap();
        // current clone moved, fej snapshot did not
        assert!((s.clones[0].p_iing - snap.p_iing).norm() > 0.1);
        assert_eq!(s.fej_values[0].p_iing, snap.p_iing);
        assert_eq!(s.fej_values[0].q_gtoi, snap.q_gtoi);
    }

    #[test]
    fn covariance_stays_symmetric_psd_under_random_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut s = test_state();
        for k in 0..20 {
            s.clone_at(k as f64).unwrap();
            random_spd_update(&mut s, &mut rng);
            if s.clones.len() > 5 {
                s.marginalize_oldest().unwrap();
            }
            let asym = (&s.cov - s.cov.transpose()).abs().max();
            assert!(asym < 1e-9);
            s.check_psd(1e-9).unwrap();
        }
    }

    #[test]
    fn json_round_trip() {
        let mut s = test_state();
        s.clone_at(1.0).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"q_GtoI\""));
        assert!(text.contains("\"p_IinG\""));
        assert!(text.contains("\"fej_values\""));
        let back: RobotState = serde_json::from_str(&text).unwrap();
        assert_eq!(back.err_dim(), s.err_dim());
        assert_eq!(back.imu.p_iing, s.imu.p_iing);
        assert_eq!(back.cov, s.cov);
    }
}

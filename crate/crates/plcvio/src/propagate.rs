//! IMU mean and covariance propagation between camera frames.
//!
//! The continuous model is
//!
//! ```text
//! q̇ = ½ Ω(ω_m − bg) q      ṗ = v      v̇ = R(q)ᵀ (a_m − ba) − g
//! ḃg = n_wg                ḃa = n_wa
//! ```
//!
//! integrated with RK4 over each inter-sample interval holding the
//! measurements constant. The error-state transition `Φ̇ = F Φ` is integrated
//! jointly with the mean, and the discrete noise uses a midpoint
//! approximation of the noise integral per interval.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{omega_matrix, skew, UnitQuaternion};
use crate::state::{ImuState, RobotState, IMU_ERR_DIM};

pub type Mat15 = SMatrix<f64, 15, 15>;
pub type Mat15x12 = SMatrix<f64, 15, 12>;

/// One inertial reading.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub w_m: Vector3<f64>,
    pub a_m: Vector3<f64>,
}

/// Continuous-time noise densities and gravity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_g: f64,
    pub sigma_a: f64,
    pub sigma_wg: f64,
    pub sigma_wa: f64,
    pub gravity: Vector3<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_g: 6.8e-4,
            sigma_a: 8.0e-3,
            sigma_wg: 7.8e-5,
            sigma_wa: 1.2e-2,
            gravity: Vector3::new(0.0, 0.0, 9.81),
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self { sigma_g: 0.0, sigma_a: 0.0, sigma_wg: 0.0, sigma_wa: 0.0, ..Self::default() }
    }

    /// 12x12 continuous-time noise covariance, ordered (n_g, n_wg, n_a, n_wa).
    pub fn q_matrix(&self) -> SMatrix<f64, 12, 12> {
        let mut q = SMatrix::<f64, 12, 12>::zeros();
        for i in 0..3 {
            q[(i, i)] = self.sigma_g * self.sigma_g;
            q[(3 + i, 3 + i)] = self.sigma_wg * self.sigma_wg;
            q[(6 + i, 6 + i)] = self.sigma_a * self.sigma_a;
            q[(9 + i, 9 + i)] = self.sigma_wa * self.sigma_wa;
        }
        q
    }
}

/// Continuous-time error-state Jacobians at the given state and reading.
///
/// `F` is 15x15 over (δθ, δp, δv, δbg, δba); `G` is 15x12 over
/// (n_g, n_wg, n_a, n_wa).
pub fn build_f_g(imu: &ImuState, sample: &ImuSample) -> (Mat15, Mat15x12) {
    let w_hat = sample.w_m - imu.bg;
    let a_hat = sample.a_m - imu.ba;
    let r_t = imu.q_gtoi.to_rotation().transpose();

    let mut f = Mat15::zeros();
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&w_hat)));
    f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-Matrix3::identity()));
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&Matrix3::identity());
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r_t * skew(&a_hat)));
    f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-r_t));

    let mut g = Mat15x12::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
    g.fixed_view_mut::<3, 3>(9, 3).copy_from(&Matrix3::identity());
    g.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-r_t));
    g.fixed_view_mut::<3, 3>(12, 9).copy_from(&Matrix3::identity());
    (f, g)
}

fn check_batch(samples: &[ImuSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for w in samples.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::NonMonotonicTime(w[1].t));
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct MeanState {
    q: Vector4<f64>,
    p: Vector3<f64>,
    v: Vector3<f64>,
}

fn mean_deriv(s: &MeanState, w_hat: &Vector3<f64>, a_hat: &Vector3<f64>, gravity: &Vector3<f64>) -> MeanState {
    let q = UnitQuaternion::from_vector4(&s.q);
    MeanState {
        q: 0.5 * omega_matrix(w_hat) * s.q,
        p: s.v,
        v: q.to_rotation().transpose() * a_hat - gravity,
    }
}

fn mean_add(a: &MeanState, b: &MeanState, h: f64) -> MeanState {
    MeanState { q: a.q + h * b.q, p: a.p + h * b.p, v: a.v + h * b.v }
}

/// RK4 step of the mean over `dt` with constant bias-corrected readings.
fn rk4_mean(s: &MeanState, w_hat: &Vector3<f64>, a_hat: &Vector3<f64>, g: &Vector3<f64>, dt: f64) -> MeanState {
    let k1 = mean_deriv(s, w_hat, a_hat, g);
    let k2 = mean_deriv(&mean_add(s, &k1, 0.5 * dt), w_hat, a_hat, g);
    let k3 = mean_deriv(&mean_add(s, &k2, 0.5 * dt), w_hat, a_hat, g);
    let k4 = mean_deriv(&mean_add(s, &k3, dt), w_hat, a_hat, g);
    let mut out = MeanState {
        q: s.q + dt / 6.0 * (k1.q + 2.0 * k2.q + 2.0 * k3.q + k4.q),
        p: s.p + dt / 6.0 * (k1.p + 2.0 * k2.p + 2.0 * k3.p + k4.p),
        v: s.v + dt / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
    };
    out.q = UnitQuaternion::from_vector4(&out.q).as_vector4();
    out
}

/// Integrates the IMU mean over the batch. Biases are held constant.
pub fn propagate_mean(imu: &ImuState, samples: &[ImuSample], gravity: &Vector3<f64>) -> Result<ImuState> {
    check_batch(samples)?;
    let mut s = MeanState { q: imu.q_gtoi.as_vector4(), p: imu.p_iing, v: imu.v_iing };
    for pair in samples.windows(2) {
        let dt = pair[1].t - pair[0].t;
        // hold the interval average: second-order accurate for smooth signals
        let w_hat = 0.5 * (pair[0].w_m + pair[1].w_m) - imu.bg;
        let a_hat = 0.5 * (pair[0].a_m + pair[1].a_m) - imu.ba;
        s = rk4_mean(&s, &w_hat, &a_hat, gravity, dt);
    }
    Ok(ImuState {
        q_gtoi: UnitQuaternion::from_vector4(&s.q),
        p_iing: s.p,
        v_iing: s.v,
        bg: imu.bg,
        ba: imu.ba,
    })
}

fn imu_state_of(mean: &MeanState, bg: &Vector3<f64>, ba: &Vector3<f64>) -> ImuState {
    ImuState {
        q_gtoi: UnitQuaternion::from_vector4(&mean.q),
        p_iing: mean.p,
        v_iing: mean.v,
        bg: *bg,
        ba: *ba,
    }
}

/// Integrates mean and state-transition matrix over the batch, returning
/// `(Φ, Q_d, propagated mean)` for the 15-dimensional IMU error block.
pub fn propagate_imu(
    imu: &ImuState,
    samples: &[ImuSample],
    noise: &NoiseConfig,
) -> Result<(Mat15, Mat15, ImuState)> {
    check_batch(samples)?;
    let q_ct = noise.q_matrix();
    let mut mean = MeanState { q: imu.q_gtoi.as_vector4(), p: imu.p_iing, v: imu.v_iing };
    let mut phi = Mat15::identity();
    let mut qd = Mat15::zeros();

    for pair in samples.windows(2) {
        let dt = pair[1].t - pair[0].t;
        let w_hat = 0.5 * (pair[0].w_m + pair[1].w_m) - imu.bg;
        let a_hat = 0.5 * (pair[0].a_m + pair[1].a_m) - imu.ba;
        let avg = ImuSample { t: pair[0].t, w_m: 0.5 * (pair[0].w_m + pair[1].w_m), a_m: 0.5 * (pair[0].a_m + pair[1].a_m) };

        // joint RK4 for the mean and Φ over this interval
        let f_of = |m: &MeanState| {
            let st = imu_state_of(m, &imu.bg, &imu.ba);
            build_f_g(&st, &avg).0
        };
        let k1m = mean_deriv(&mean, &w_hat, &a_hat, &noise.gravity);
        let f1 = f_of(&mean);
        let m2 = mean_add(&mean, &k1m, 0.5 * dt);
        let k2m = mean_deriv(&m2, &w_hat, &a_hat, &noise.gravity);
        let f2 = f_of(&m2);
        let m3 = mean_add(&mean, &k2m, 0.5 * dt);
        let k3m = mean_deriv(&m3, &w_hat, &a_hat, &noise.gravity);
        let f3 = f_of(&m3);
        let m4 = mean_add(&mean, &k3m, dt);
        let k4m = mean_deriv(&m4, &w_hat, &a_hat, &noise.gravity);
        let f4 = f_of(&m4);

        let phi_step = {
            let k1 = f1;
            let k2 = f2 * (Mat15::identity() + 0.5 * dt * k1);
            let k3 = f3 * (Mat15::identity() + 0.5 * dt * k2);
            let k4 = f4 * (Mat15::identity() + dt * k3);
            Mat15::identity() + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        };

        // midpoint noise: Φ_half G Q Gᵀ Φ_halfᵀ dt evaluated at the interval midpoint
        let mid_state = imu_state_of(&m2, &imu.bg, &imu.ba);
        let (f_mid, g_mid) = build_f_g(&mid_state, &avg);
        let phi_half = Mat15::identity() + 0.5 * dt * f_mid;
        let qd_step = phi_half * g_mid * q_ct * g_mid.transpose() * phi_half.transpose() * dt;

        qd = phi_step * qd * phi_step.transpose() + qd_step;
        phi = phi_step * phi;
        let mut next = MeanState {
            q: mean.q + dt / 6.0 * (k1m.q + 2.0 * k2m.q + 2.0 * k3m.q + k4m.q),
            p: mean.p + dt / 6.0 * (k1m.p + 2.0 * k2m.p + 2.0 * k3m.p + k4m.p),
            v: mean.v + dt / 6.0 * (k1m.v + 2.0 * k2m.v + 2.0 * k3m.v + k4m.v),
        };
        next.q = UnitQuaternion::from_vector4(&next.q).as_vector4();
        mean = next;
    }

    // enforce exact symmetry of the accumulated noise
    qd = 0.5 * (qd + qd.transpose());
    Ok((phi, qd, imu_state_of(&mean, &imu.bg, &imu.ba)))
}

/// Propagates a full robot state: applies `Φ` and `Q_d` to the IMU block and
/// the IMU-to-rest cross blocks, leaving clone/calib blocks untouched.
pub fn propagate_state(
    state: &mut RobotState,
    samples: &[ImuSample],
    noise: &NoiseConfig,
) -> Result<(Mat15, Mat15)> {
    let (phi, qd, new_imu) = propagate_imu(&state.imu, samples, noise)?;
    state.imu = new_imu;

    let n = state.err_dim();
    let k = IMU_ERR_DIM;
    let phi_d = DMatrix::from_fn(k, k, |i, j| phi[(i, j)]);

    let p_ii = state.cov.view((0, 0), (k, k)).clone_owned();
    let p_ir = state.cov.view((0, k), (k, n - k)).clone_owned();
    let mut new_ii = &phi_d * &p_ii * phi_d.transpose();
    for i in 0..k {
        for j in 0..k {
            new_ii[(i, j)] += qd[(i, j)];
        }
    }
    let new_ir = &phi_d * &p_ir;
    state.cov.view_mut((0, 0), (k, k)).copy_from(&new_ii);
    state.cov.view_mut((0, k), (k, n - k)).copy_from(&new_ir);
    state.cov.view_mut((k, 0), (n - k, k)).copy_from(&new_ir.transpose());
    state.symmetrize();
    Ok((phi, qd))
}

/// Extracts the samples covering `[t0, t1]`, linearly interpolating readings
/// at both boundaries when a sample interval spans them.
pub fn select_span(samples: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    check_batch(samples)?;
    if t1 < t0 {
        return Err(Error::NonMonotonicTime(t1));
    }
    let lerp = |a: &ImuSample, b: &ImuSample, t: f64| {
        let u = (t - a.t) / (b.t - a.t);
        ImuSample { t, w_m: a.w_m + u * (b.w_m - a.w_m), a_m: a.a_m + u * (b.a_m - a.a_m) }
    };
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.t <= t0 {
            continue;
        }
        if out.is_empty() {
            if i == 0 {
                // batch starts after t0: start at the first sample
                out.push(*s);
                continue;
            }
            out.push(lerp(&samples[i - 1], s, t0));
        }
        if s.t >= t1 {
            let last = *out.last().unwrap();
            if s.t > t1 {
                out.push(lerp(&last, s, t1));
            } else {
                out.push(*s);
            }
            break;
        }
        out.push(*s);
    }
    if out.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(out)
}

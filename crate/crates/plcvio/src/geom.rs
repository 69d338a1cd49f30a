//! Quaternion, rotation, and 3D-line algebra shared by every other module.
//!
//! # Conventions
//!
//! Quaternions follow the JPL convention: scalar-last `[x y z w]`, representing
//! frame rotations. `R(q)` maps global coordinates into the local frame, and the
//! product composes rotation matrices in the same order,
//!
//! ```text
//! R(a ⊗ b) = R(a) · R(b)
//! ```
//!
//! Error quaternions multiply on the left, `q = δq ⊗ q̂` with
//! `δq ≈ [½δθᵀ 1]ᵀ`, so a positive `δθ_z` on an identity estimate yields a
//! small positive rotation of the frame about +z. All of the filter's attitude
//! Jacobians assume this ordering; do not mix in Hamilton-convention products.
//!
//! 3D lines come in two forms: [`PluckerLine`] `(n, v)` with `n = p1 × p2`
//! (moment) and `v = p2 − p1` (direction), and the minimal closest-point form
//! [`CPLine`], a unit quaternion whose rotation columns are
//! `[n_e  v_e  n_e × v_e]` scaled by the origin-to-line distance `d`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Quaternion-rate matrix `Ω(ω)` with `q̇ = ½ Ω(ω) q`.
///
/// Top-left block is `−skew(ω)`, top-right column is `ω`, bottom row `(−ωᵀ, 0)`.
pub fn omega_matrix(w: &Vector3<f64>) -> Matrix4<f64> {
    let s = skew(w);
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-s));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(w);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-w.transpose()));
    m
}

/// SO(3) exponential `exp(skew(phi))` (active rotation by `|phi|` about `phi`).
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let s = skew(phi);
    if theta < 1e-10 {
        // second-order series keeps the result orthonormal to machine precision
        Matrix3::identity() + s + 0.5 * s * s
    } else {
        Matrix3::identity() + (theta.sin() / theta) * s
            + ((1.0 - theta.cos()) / (theta * theta)) * s * s
    }
}

/// SO(3) logarithm, the inverse of [`so3_exp`].
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    // via the quaternion to stay stable near pi
    let q = UnitQuaternion::from_rotation(&r.transpose());
    let vn = q.vector().norm();
    if vn < 1e-12 {
        return Vector3::zeros();
    }
    let angle = 2.0 * vn.atan2(q.w);
    q.vector() / vn * angle
}

/// JPL (scalar-last) unit quaternion representing a frame rotation.
///
/// Canonicalized so that `w >= 0`; a quaternion and its negation denote the
/// same rotation, and fixing the sign lets tests compare componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, z: 0.0, w: 1.0 }
    }

    /// Builds from raw components, normalizing and canonicalizing the sign.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self { x, y, z, w }.normalized()
    }

    pub fn normalized(&self) -> Self {
        let n = (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt();
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Self { x: self.x * s, y: self.y * s, z: self.z * s, w: self.w * s }
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.z, self.w)
    }

    pub fn from_vector4(v: &Vector4<f64>) -> Self {
        Self::new(v.x, v.y, v.z, v.w)
    }

    /// JPL product `self ⊗ rhs`: `R(self ⊗ rhs) = R(self) R(rhs)`.
    pub fn multiply(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let av = self.vector();
        let bv = rhs.vector();
        let v = self.w * bv + rhs.w * av - av.cross(&bv);
        let w = self.w * rhs.w - av.dot(&bv);
        UnitQuaternion::new(v.x, v.y, v.z, w)
    }

    pub fn inverse(&self) -> UnitQuaternion {
        UnitQuaternion { x: -self.x, y: -self.y, z: -self.z, w: self.w }
    }

    /// Rotation matrix `R(q) = (2w²−1)I − 2w·skew(v) + 2vvᵀ` (global → local).
    pub fn to_rotation(&self) -> Matrix3<f64> {
        let v = self.vector();
        let w = self.w;
        (2.0 * w * w - 1.0) * Matrix3::identity() - 2.0 * w * skew(&v)
            + 2.0 * v * v.transpose()
    }

    /// Inverse of [`Self::to_rotation`] (Shepperd's method).
    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        let t = r.trace();
        let (d0, d1, d2) = (r[(0, 0)], r[(1, 1)], r[(2, 2)]);
        if t >= d0 && t >= d1 && t >= d2 {
            let w = 0.5 * (1.0 + t).sqrt();
            let s = 1.0 / (4.0 * w);
            Self::new(
                (r[(1, 2)] - r[(2, 1)]) * s,
                (r[(2, 0)] - r[(0, 2)]) * s,
                (r[(0, 1)] - r[(1, 0)]) * s,
                w,
            )
        } else if d0 >= d1 && d0 >= d2 {
            let x = 0.5 * (1.0 + 2.0 * d0 - t).sqrt();
            let s = 1.0 / (4.0 * x);
            Self::new(
                x,
                (r[(0, 1)] + r[(1, 0)]) * s,
                (r[(2, 0)] + r[(0, 2)]) * s,
                (r[(1, 2)] - r[(2, 1)]) * s,
            )
        } else if d1 >= d2 {
            let y = 0.5 * (1.0 + 2.0 * d1 - t).sqrt();
            let s = 1.0 / (4.0 * y);
            Self::new(
                (r[(0, 1)] + r[(1, 0)]) * s,
                y,
                (r[(1, 2)] + r[(2, 1)]) * s,
                (r[(2, 0)] - r[(0, 2)]) * s,
            )
        } else {
            let z = 0.5 * (1.0 + 2.0 * d2 - t).sqrt();
            let s = 1.0 / (4.0 * z);
            Self::new(
                (r[(2, 0)] + r[(0, 2)]) * s,
                (r[(1, 2)] + r[(2, 1)]) * s,
                z,
                (r[(0, 1)] - r[(1, 0)]) * s,
            )
        }
    }

    /// Exact frame rotation of `angle` about unit `axis`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let h = 0.5 * angle;
        let v = axis.normalize() * h.sin();
        Self::new(v.x, v.y, v.z, h.cos())
    }

    /// First-order retraction `[½δθᵀ 1]ᵀ`, renormalized.
    pub fn small_angle(dtheta: &Vector3<f64>) -> Self {
        Self::new(0.5 * dtheta.x, 0.5 * dtheta.y, 0.5 * dtheta.z, 1.0)
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vector().norm().atan2(self.w.abs())
    }

    /// Small-angle error vector `δθ` such that `self ≈ small_angle(δθ) ⊗ rhs`.
    pub fn boxminus(&self, rhs: &UnitQuaternion) -> Vector3<f64> {
        let dq = self.multiply(&rhs.inverse());
        let s = if dq.w.abs() < 1e-12 { 1.0 } else { dq.w.signum() };
        2.0 * s * dq.vector() / dq.w.abs().max(1e-12)
    }
}

/// 3D line in Plücker coordinates: `n = p1 × p2`, `v = p2 − p1`, with `n ⊥ v`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PluckerLine {
    pub n: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl PluckerLine {
    pub fn from_points(p1: &Vector3<f64>, p2: &Vector3<f64>, eps: f64) -> Result<Self> {
        let v = p2 - p1;
        if v.norm() <= eps {
            return Err(Error::DegenerateLine("coincident points"));
        }
        Ok(Self { n: p1.cross(p2), v })
    }

    /// Rescales so that the direction has unit norm; `|n|` then equals the
    /// origin-to-line distance.
    pub fn normalized(&self) -> Result<Self> {
        let vn = self.v.norm();
        if vn == 0.0 {
            return Err(Error::DegenerateLine("zero direction"));
        }
        Ok(Self { n: self.n / vn, v: self.v / vn })
    }

    /// Distance from the global origin to the line.
    pub fn origin_distance(&self) -> f64 {
        let vn = self.v.norm();
        if vn == 0.0 { 0.0 } else { self.n.norm() / vn }
    }
}

/// Closest-point line: distance scalar times a unit quaternion whose rotation
/// columns are `[n_e  v_e  n_e × v_e]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CPLine {
    pub q: UnitQuaternion,
    pub d: f64,
}

/// 4-DOF error of a [`CPLine`]: left-multiplicative `δθ` on the quaternion and
/// additive `δd` on the distance.
#[derive(Debug, Clone, Copy, Default)]
pub struct CPLineError {
    pub dtheta: Vector3<f64>,
    pub dd: f64,
}

impl CPLine {
    pub fn from_plucker(line: &PluckerLine) -> Result<Self> {
        let vn = line.v.norm();
        if vn == 0.0 {
            return Err(Error::DegenerateLine("zero direction"));
        }
        let v_e = line.v / vn;
        let d = line.n.norm() / vn;
        let n_e = if d > 1e-12 {
            // re-orthogonalize against v_e so the triad stays orthonormal
            let ne = line.n / line.n.norm();
            (ne - ne.dot(&v_e) * v_e).normalize()
        } else {
            // line through the origin: any unit normal works; pick the first
            // canonical axis not parallel to v for determinism
            let mut pick = Vector3::x();
            for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
                if v_e.cross(&axis).norm() > 0.1 {
                    pick = axis;
                    break;
                }
            }
            v_e.cross(&pick).normalize()
        };
        let u_e = n_e.cross(&v_e);
        let mut r = Matrix3::zeros();
        r.set_column(0, &n_e);
        r.set_column(1, &v_e);
        r.set_column(2, &u_e);
        Ok(Self { q: UnitQuaternion::from_rotation(&r), d })
    }

    pub fn to_plucker(&self) -> PluckerLine {
        let r = self.q.to_rotation();
        let n_e: Vector3<f64> = r.column(0).into();
        let v_e: Vector3<f64> = r.column(1).into();
        PluckerLine { n: self.d * n_e, v: v_e }
    }

    /// Applies the 4-DOF error. A negative resulting distance is clamped to
    /// zero; the measurement gates discard such lines downstream.
    pub fn boxplus(&self, e: &CPLineError) -> CPLine {
        CPLine {
            q: UnitQuaternion::small_angle(&e.dtheta).multiply(&self.q),
            d: (self.d + e.dd).max(0.0),
        }
    }
}

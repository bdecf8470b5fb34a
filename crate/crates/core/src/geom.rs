//! SO(3)/SE(3) arithmetic for poses, dynamics and on-manifold optimization.
//!
//! Rotations are stored as 3×3 matrices. Tangent vectors ([`Twist`]) are
//! ordered `(rotation, translation)` everywhere in the crate, and the
//! retraction is the left action `pose ↦ exp(δ) ∘ pose`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::f64::consts::PI;
use std::ops::Mul;
use thiserror::Error;

/// Below this rotation angle the exponential/logarithm use series expansions.
pub const SMALL_ANGLE: f64 = 1e-7;

/// `log` refuses rotations whose angle is within this margin of π.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Orthonormality drift that triggers polar re-orthonormalization.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    /// The rotation angle is too close to π for a unique logarithm.
    #[error("rotation angle {angle} is within {NEAR_PI_MARGIN} of pi; re-anchor the reference pose")]
    AngleNearPi { angle: f64 },
}

/// Skew-symmetric matrix `[v]×` such that `[v]× w = v × w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]; reads the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Coefficients `(sinθ/θ, (1−cosθ)/θ², (θ−sinθ)/θ³)` with series fallbacks.
fn exp_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (a, b, _) = exp_coefficients(theta);
    let k = hat(omega);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation angle of `r` in `[0, π]`, computed with `atan2` so that it is
/// accurate near both ends of the range.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = vee(r).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Rotation vector of `r`. Total on SO(3); at exactly π the sign of the
/// axis is arbitrary.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = vee(r);
    let s = w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        // θ/sinθ ≈ 1 + θ²/6
        return w * (1.0 + s * s / 6.0);
    }
    if c > -0.9 {
        return w * (theta / s);
    }
    // Near π the skew part is tiny; recover the axis from the symmetric part
    // R + Rᵀ = 2cosθ I + 2(1−cosθ) k kᵀ.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let one_minus_c = 1.0 - c;
    let diag = Vector3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]);
    let i = diag.imax();
    let mut axis = sym.column(i).into_owned() / (diag[i] * one_minus_c).max(0.0).sqrt();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ) exp(Jr(φ) δ)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (_, b, c) = exp_coefficients(theta);
    let k = hat(phi);
    Matrix3::identity() - k * b + k * k * c
}

/// Inverse of [`so3_right_jacobian`].
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let d = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (s, c) = theta.sin_cos();
        1.0 / (theta * theta) - (1.0 + c) / (2.0 * theta * s)
    };
    Matrix3::identity() + k * 0.5 + k * k * d
}

/// Closest rotation matrix in the Frobenius sense (polar factor).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * v_t;
    }
    out
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Element of the tangent space of SE(3), ordered (rotation, translation).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rotation: v.fixed_rows::<3>(0).into_owned(),
            translation: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.rotation * s, self.translation * s)
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.rotation + rhs.rotation, self.translation + rhs.translation)
    }
}

/// Rigid transform mapping body coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }.renormalized()
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `yaw` radians about +z, then translation.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(&Vector3::new(0.0, 0.0, yaw)),
            translation: t,
        }
    }

    /// Group exponential.
    pub fn exp(delta: &Twist) -> Self {
        let omega = delta.rotation;
        let theta = omega.norm();
        let (a, b, c) = exp_coefficients(theta);
        let k = hat(&omega);
        let k2 = k * k;
        let rotation = Matrix3::identity() + k * a + k2 * b;
        let v = Matrix3::identity() + k * b + k2 * c;
        Self {
            rotation,
            translation: v * delta.translation,
        }
    }

    /// Group logarithm on the principal domain (angle < π − 1e-6).
    pub fn log(&self) -> Result<Twist, GeomError> {
        let angle = rotation_angle(&self.rotation);
        if angle >= PI - NEAR_PI_MARGIN {
            return Err(GeomError::AngleNearPi { angle });
        }
        let omega = so3_log(&self.rotation);
        let theta = omega.norm();
        let k = hat(&omega);
        let d = if theta < 1e-4 {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            let (a, b, _) = exp_coefficients(theta);
            (1.0 - a / (2.0 * b)) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - k * 0.5 + k * k * d;
        Ok(Twist::new(omega, v_inv * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
        .renormalized()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `exp(delta) ∘ self`. Each call lands back on the manifold; steps are
    /// never accumulated in the tangent plane.
    pub fn retract(&self, delta: &Twist) -> Pose {
        Pose::exp(delta).compose(self)
    }

    /// Adjoint in (rotation, translation) ordering:
    /// `exp(Adj(P)·δ) ∘ P = P ∘ exp(δ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * self.rotation));
        m
    }

    /// Re-orthonormalize the rotation when drift exceeds [`ORTHONORMAL_TOL`].
    pub fn renormalized(mut self) -> Pose {
        if orthonormality_error(&self.rotation) > ORTHONORMAL_TOL {
            self.rotation = orthonormalize(&self.rotation);
        }
        self
    }

    /// Geodesic rotation distance and Euclidean translation distance.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let r = self.rotation.transpose() * other.rotation;
        (rotation_angle(&r), (self.translation - other.translation).norm())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[3 * r + c] = self.rotation[(r, c)];
            }
        }
        PoseRepr {
            rotation,
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let rotation = Matrix3::from_row_slice(&repr.rotation);
        if orthonormality_error(&rotation) > 1e-6 || rotation.determinant() < 0.0 {
            return Err(serde::de::Error::custom("pose rotation is not a rotation matrix"));
        }
        Ok(Pose::new(rotation, Vector3::from(repr.translation)))
    }
}

/// Wrap an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

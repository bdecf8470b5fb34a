//! Environment models: position/direction ↦ (density, color).
//!
//! Density is differential opacity in 1/m. Every field is immutable after
//! construction and safe to evaluate from many threads.

mod analytic;
mod mlp;

pub use analytic::{AnalyticScene, Primitive, SceneFile, Shape, Texture, SCENE_FORMAT_VERSION};
pub use mlp::{Activation, DenseLayer, MlpField, MLP_MAGIC, MLP_VERSION};

use crate::geom::Pose;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed weight file: {0}")]
    MalformedWeights(String),
    #[error("unsupported activation tag {0}")]
    UnsupportedActivation(u8),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("scene json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self::new(Vector3::repeat(-half), Vector3::repeat(half))
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diameter(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    /// Bounding box of this box after mapping its corners through `pose`.
    pub fn transformed(&self, pose: &Pose) -> Aabb {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for k in 0..8 {
            let c = Vector3::new(
                if k & 1 == 0 { self.min.x } else { self.max.x },
                if k & 2 == 0 { self.min.y } else { self.max.y },
                if k & 4 == 0 { self.min.z } else { self.max.z },
            );
            let w = pose.transform_point(&c);
            lo = lo.inf(&w);
            hi = hi.sup(&w);
        }
        Aabb::new(lo, hi)
    }
}

/// Density and color at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub density: f64,
    pub color: Vector3<f64>,
}

/// A [`FieldSample`] together with its first derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldDerivatives {
    pub density: f64,
    pub density_grad: Vector3<f64>,
    pub color: Vector3<f64>,
    /// `∂color/∂p`, rows are channels.
    pub color_pos_jac: Matrix3<f64>,
    /// `∂color/∂d`.
    pub color_dir_jac: Matrix3<f64>,
}

impl FieldDerivatives {
    pub fn zero() -> Self {
        Self {
            density: 0.0,
            density_grad: Vector3::zeros(),
            color: Vector3::zeros(),
            color_pos_jac: Matrix3::zeros(),
            color_dir_jac: Matrix3::zeros(),
        }
    }
}

pub trait RadianceField: Send + Sync {
    fn bounds(&self) -> Aabb;

    /// Non-negative density; zero outside [`bounds`](Self::bounds).
    fn density(&self, p: &Vector3<f64>) -> f64;

    fn density_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.density_with_gradient(p).1
    }

    fn density_with_gradient(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let s = self.sample_with_derivatives(p, &Vector3::z());
        (s.density, s.density_grad)
    }

    /// Color in `[0,1]³` seen along unit direction `d`.
    fn color(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> Vector3<f64> {
        self.sample(p, d).color
    }

    fn sample(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldSample;

    fn sample_with_derivatives(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldDerivatives;
}

/// Exact inside/outside test for ground-truth evaluation.
pub trait OccupancyOracle: Send + Sync {
    /// Signed distance to the nearest surface, negative inside.
    fn signed_distance(&self, p: &Vector3<f64>) -> f64;

    fn occupied(&self, p: &Vector3<f64>) -> bool {
        self.signed_distance(p) <= 0.0
    }
}

impl<F: RadianceField + ?Sized> RadianceField for &F {
    fn bounds(&self) -> Aabb {
        (**self).bounds()
    }
    fn density(&self, p: &Vector3<f64>) -> f64 {
        (**self).density(p)
    }
    fn density_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (**self).density_gradient(p)
    }
    fn density_with_gradient(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        (**self).density_with_gradient(p)
    }
    fn sample(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldSample {
        (**self).sample(p, d)
    }
    fn sample_with_derivatives(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldDerivatives {
        (**self).sample_with_derivatives(p, d)
    }
}

impl<F: RadianceField + ?Sized> RadianceField for std::sync::Arc<F> {
    fn bounds(&self) -> Aabb {
        (**self).bounds()
    }
    fn density(&self, p: &Vector3<f64>) -> f64 {
        (**self).density(p)
    }
    fn density_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (**self).density_gradient(p)
    }
    fn density_with_gradient(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        (**self).density_with_gradient(p)
    }
    fn sample(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldSample {
        (**self).sample(p, d)
    }
    fn sample_with_derivatives(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldDerivatives {
        (**self).sample_with_derivatives(p, d)
    }
}

/// Constant density and color inside a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformField {
    pub bounds: Aabb,
    pub density: f64,
    pub color: Vector3<f64>,
}

impl RadianceField for UniformField {
    fn bounds(&self) -> Aabb {
        self.bounds
    }
    fn density(&self, p: &Vector3<f64>) -> f64 {
        if self.bounds.contains(p) {
            self.density
        } else {
            0.0
        }
    }
    fn sample(&self, p: &Vector3<f64>, _d: &Vector3<f64>) -> FieldSample {
        FieldSample {
            density: self.density(p),
            color: self.color,
        }
    }
    fn sample_with_derivatives(&self, p: &Vector3<f64>, _d: &Vector3<f64>) -> FieldDerivatives {
        FieldDerivatives {
            density: self.density(p),
            color: self.color,
            ..FieldDerivatives::zero()
        }
    }
}

/// `G(p) = F(M p)`: the inner field re-expressed in a frame moved by `M⁻¹`.
///
/// Rendering `G` from `M⁻¹ ∘ T` is the same as rendering `F` from `T`.
#[derive(Debug, Clone)]
pub struct TransformedField<F> {
    pub inner: F,
    pub transform: Pose,
}

impl<F: RadianceField> TransformedField<F> {
    pub fn new(inner: F, transform: Pose) -> Self {
        Self { inner, transform }
    }
}

impl<F: RadianceField> RadianceField for TransformedField<F> {
    fn bounds(&self) -> Aabb {
        self.inner.bounds().transformed(&self.transform.inverse())
    }
    fn density(&self, p: &Vector3<f64>) -> f64 {
        self.inner.density(&self.transform.transform_point(p))
    }
    fn sample(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldSample {
        let r = &self.transform.rotation;
        self.inner.sample(&self.transform.transform_point(p), &(r * d))
    }
    fn sample_with_derivatives(&self, p: &Vector3<f64>, d: &Vector3<f64>) -> FieldDerivatives {
        let r = self.transform.rotation;
        let s = self
            .inner
            .sample_with_derivatives(&self.transform.transform_point(p), &(r * d));
        FieldDerivatives {
            density: s.density,
            density_grad: r.transpose() * s.density_grad,
            color: s.color,
            color_pos_jac: s.color_pos_jac * r,
            color_dir_jac: s.color_dir_jac * r,
        }
    }
}

impl<F: OccupancyOracle> OccupancyOracle for TransformedField<F> {
    fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.inner.signed_distance(&self.transform.transform_point(p))
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
    }

    #[test]
    fn aabb_transform_contains_image_of_corners() {
        let b = Aabb::cube(1.0);
        let pose = Pose::from_yaw(0.3, Vector3::new(1.0, 2.0, 0.0));
        let t = b.transformed(&pose);
        assert!(t.contains(&pose.transform_point(&Vector3::new(1.0, -1.0, 1.0))));
    }
}

//! Scenes built from soft signed-distance primitives.
//!
//! Each primitive contributes `ρ_max · sigmoid(−sdf(p)/β)`; the scene color is
//! the density-weighted mean of the primitive colors.

use super::{sigmoid, Aabb, FieldDerivatives, FieldError, FieldSample, OccupancyOracle, RadianceField};
use crate::geom::Pose;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Beyond this many softness lengths outside the bounding sphere a primitive
/// is skipped (its density is below `ρ_max·e⁻³⁰`).
const CULL_SOFTNESS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Axis along the local z-axis.
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    /// Characteristic radius used for the default softness.
    pub fn radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents: h } => h[0].min(h[1]).min(h[2]),
            Shape::Cylinder { radius, .. } => radius,
        }
    }

    fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents: h } => Vector3::from(h).norm(),
            Shape::Cylinder { radius, half_height } => radius.hypot(half_height),
        }
    }

    /// Signed distance and its gradient in the shape's own frame.
    pub fn sdf(&self, q: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match *self {
            Shape::Sphere { radius } => {
                let n = q.norm();
                let g = if n > 0.0 { q / n } else { Vector3::x() };
                (n - radius, g)
            }
            Shape::Box { half_extents } => {
                let h = Vector3::from(half_extents);
                let d = q.abs() - h;
                let outside = d.sup(&Vector3::zeros());
                let on = outside.norm();
                let sign = q.map(|v| if v < 0.0 { -1.0 } else { 1.0 });
                if on > 0.0 {
                    (on, outside.component_mul(&sign) / on)
                } else {
                    let i = d.imax();
                    let mut g = Vector3::zeros();
                    g[i] = sign[i];
                    (d[i], g)
                }
            }
            Shape::Cylinder { radius, half_height } => {
                let rxy = q.x.hypot(q.y);
                let radial = if rxy > 0.0 {
                    Vector3::new(q.x / rxy, q.y / rxy, 0.0)
                } else {
                    Vector3::x()
                };
                let axial = Vector3::new(0.0, 0.0, if q.z < 0.0 { -1.0 } else { 1.0 });
                let dr = rxy - radius;
                let dz = q.z.abs() - half_height;
                if dr > 0.0 && dz > 0.0 {
                    let n = dr.hypot(dz);
                    (n, (radial * dr + axial * dz) / n)
                } else if dr > 0.0 {
                    (dr, radial)
                } else if dz > 0.0 {
                    (dz, axial)
                } else if dr > dz {
                    (dr, radial)
                } else {
                    (dz, axial)
                }
            }
        }
    }
}

/// Smooth sinusoidal brightness modulation in the primitive's frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// Fraction of the albedo that is modulated, in `[0,1]`.
    pub amplitude: f64,
    /// Spatial angular frequency (rad/m).
    pub frequency: f64,
}

impl Texture {
    /// Brightness factor in `[1 − amplitude, 1]` and its local gradient.
    fn factor(&self, q: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let f = self.frequency;
        let s = (q.x * f).sin() + (q.y * f).sin() + (q.z * f).sin();
        let ds = Vector3::new((q.x * f).cos(), (q.y * f).cos(), (q.z * f).cos()) * f;
        let a = self.amplitude;
        (1.0 - a * (1.0 - s / 3.0) * 0.5, ds * (a / 6.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    #[serde(default)]
    pub pose: Pose,
    pub peak_density: f64,
    /// Softness β (m); defaults to 2% of the shape radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub softness: Option<f64>,
    pub albedo: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<Texture>,
}

impl Primitive {
    pub fn new(shape: Shape, pose: Pose, peak_density: f64, albedo: [f64; 3]) -> Self {
        Self {
            shape,
            pose,
            peak_density,
            softness: None,
            albedo,
            texture: None,
        }
    }

    pub fn sphere(center: Vector3<f64>, radius: f64, peak_density: f64, albedo: [f64; 3]) -> Self {
        Self::new(Shape::Sphere { radius }, Pose::from_translation(center), peak_density, albedo)
    }

    pub fn cuboid(pose: Pose, half_extents: [f64; 3], peak_density: f64, albedo: [f64; 3]) -> Self {
        Self::new(Shape::Box { half_extents }, pose, peak_density, albedo)
    }

    pub fn cylinder(pose: Pose, radius: f64, half_height: f64, peak_density: f64, albedo: [f64; 3]) -> Self {
        Self::new(Shape::Cylinder { radius, half_height }, pose, peak_density, albedo)
    }

    pub fn with_softness(mut self, beta: f64) -> Self {
        self.softness = Some(beta);
        self
    }

    pub fn with_texture(mut self, amplitude: f64, frequency: f64) -> Self {
        self.texture = Some(Texture { amplitude, frequency });
        self
    }

    pub fn beta(&self) -> f64 {
        self.softness.unwrap_or(0.02 * self.shape.radius())
    }

    fn local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation.transpose() * (p - self.pose.translation)
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.shape.sdf(&self.local(p)).0
    }

    fn culled(&self, q: &Vector3<f64>, beta: f64) -> bool {
        q.norm() - self.shape.bounding_radius() > CULL_SOFTNESS * beta
    }

    fn density(&self, p: &Vector3<f64>) -> f64 {
        let q = self.local(p);
        let beta = self.beta();
        if self.culled(&q, beta) {
            return 0.0;
        }
        self.peak_density * sigmoid(-self.shape.sdf(&q).0 / beta)
    }

    fn color_at(&self, q: &Vector3<f64>) -> Vector3<f64> {
        let a = Vector3::from(self.albedo);
        match &self.texture {
            Some(t) => a * t.factor(q).0,
            None => a,
        }
    }
}

/// A bounded collection of soft primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub bounds: Aabb,
    #[serde(default = "default_background")]
    pub background: [f64; 3],
    #[serde(default = "default_scale")]
    pub density_scale: f64,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

fn default_background() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}

fn default_scale() -> f64 {
    1.0
}

/// On-disk scene description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub scene: AnalyticScene,
}

impl AnalyticScene {
    pub fn empty(bounds: Aabb) -> Self {
        Self {
            bounds,
            background: default_background(),
            density_scale: 1.0,
            primitives: Vec::new(),
        }
    }

    pub fn with_primitive(mut self, p: Primitive) -> Self {
        self.primitives.push(p);
        self
    }

    pub fn with_background(mut self, rgb: [f64; 3]) -> Self {
        self.background = rgb;
        self
    }

    pub fn background(&self) -> Vector3<f64> {
        Vector3::from(self.background)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::InvalidScene(m.to_string()));
        if (0..3).any(|i| !(self.bounds.min[i] < self.bounds.max[i])) {
            return bad("bounds min must be below max");
        }
        if !(self.density_scale >= 0.0) {
            return bad("density_scale must be non-negative");
        }
        for p in &self.primitives {
            if !(p.peak_density >= 0.0) || !(p.beta() > 0.0) {
                return bad("primitive peak_density must be >= 0 and softness > 0");
            }
            if p.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad("albedo components must lie in [0,1]");
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, FieldError> {
        let file: SceneFile = serde_json::from_str(s)?;
        if file.format_version != SCENE_FORMAT_VERSION {
            return Err(FieldError::InvalidScene(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        file.scene.validate()?;
        Ok(file.scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SceneFile {
            format_version: SCENE_FORMAT_VERSION,
            scene: self.clone(),
        })
        .expect("scene serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FieldError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FieldError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Largest primitive peak density, scaled.
    pub fn max_density(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.peak_density)
            .fold(0.0, f64::max)
            * self.density_scale
    }

    fn raw_density(&self, p: &Vector3<f64>) -> f64 {
        self.primitives.iter().map(|prim| prim.density(p)).sum()
    }
}

impl RadianceField for AnalyticScene {
    fn bounds(&self) -> Aabb {
        self.bounds
    }

    fn density(&self, p: &Vector3<f64>) -> f64 {
        if !self.bounds.contains(p) {
            return 0.0;
        }
        self.density_scale * self.raw_density(p)
    }

    fn density_with_gradient(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        if !self.bounds.contains(p) {
            return (0.0, Vector3::zeros());
        }
        let mut rho = 0.0;
        let mut grad = Vector3::zeros();
        for prim in &self.primitives {
            let q = prim.local(p);
            let beta = prim.beta();
            if prim.culled(&q, beta) {
                continue;
            }
            let (sdf, g) = prim.shape.sdf(&q);
            let s = sigmoid(-sdf / beta);
            rho += prim.peak_density * s;
            grad += prim.pose.rotation * g * (-prim.peak_density * s * (1.0 - s) / beta);
        }
        (self.density_scale * rho, grad * self.density_scale)
    }

    fn sample(&self, p: &Vector3<f64>, _d: &Vector3<f64>) -> FieldSample {
        if !self.bounds.contains(p) {
            return FieldSample {
                density: 0.0,
                color: Vector3::zeros(),
            };
        }
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for prim in &self.primitives {
            let q = prim.local(p);
            let beta = prim.beta();
            if prim.culled(&q, beta) {
                continue;
            }
            let rho = prim.peak_density * sigmoid(-prim.shape.sdf(&q).0 / beta);
            num += prim.color_at(&q) * rho;
            den += rho;
        }
        let color = if den > 0.0 { num / den } else { Vector3::zeros() };
        FieldSample {
            density: self.density_scale * den,
            color: color.map(|c| c.clamp(0.0, 1.0)),
        }
    }

    fn sample_with_derivatives(&self, p: &Vector3<f64>, _d: &Vector3<f64>) -> FieldDerivatives {
        if !self.bounds.contains(p) {
            return FieldDerivatives::zero();
        }
        let mut num = Vector3::zeros();
        let mut num_jac = Matrix3::zeros();
        let mut den = 0.0;
        let mut den_grad = Vector3::zeros();
        for prim in &self.primitives {
            let q = prim.local(p);
            let beta = prim.beta();
            if prim.culled(&q, beta) {
                continue;
            }
            let r = &prim.pose.rotation;
            let (sdf, g_local) = prim.shape.sdf(&q);
            let s = sigmoid(-sdf / beta);
            let rho = prim.peak_density * s;
            let grad = r * g_local * (-prim.peak_density * s * (1.0 - s) / beta);
            let albedo = Vector3::from(prim.albedo);
            let (color, color_jac) = match &prim.texture {
                Some(t) => {
                    let (f, gf) = t.factor(&q);
                    (albedo * f, albedo * (r * gf).transpose())
                }
                None => (albedo, Matrix3::zeros()),
            };
            num += color * rho;
            num_jac += color * grad.transpose() + color_jac * rho;
            den += rho;
            den_grad += grad;
        }
        if den <= 0.0 {
            return FieldDerivatives::zero();
        }
        let color = num / den;
        let color_pos_jac = (num_jac - color * den_grad.transpose()) / den;
        FieldDerivatives {
            density: self.density_scale * den,
            density_grad: den_grad * self.density_scale,
            color,
            color_pos_jac,
            color_dir_jac: Matrix3::zeros(),
        }
    }
}

impl OccupancyOracle for AnalyticScene {
    fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let inner = self
            .primitives
            .iter()
            .map(|prim| prim.signed_distance(p))
            .fold(f64::INFINITY, f64::min);
        let half = self.bounds.extent() * 0.5;
        let outside = ((p - self.bounds.center()).abs() - half)
            .sup(&Vector3::zeros())
            .norm();
        if outside > 0.0 {
            inner.max(outside)
        } else {
            inner
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_sphere() -> AnalyticScene {
        AnalyticScene::empty(Aabb::cube(3.0))
            .with_primitive(Primitive::sphere(Vector3::zeros(), 1.0, 10.0, [1.0, 0.0, 0.0]).with_softness(0.01))
    }

    fn composite() -> AnalyticScene {
        let tilt = Pose::new(
            crate::geom::so3_exp(&Vector3::new(0.3, -0.2, 0.5)),
            Vector3::new(0.8, -0.4, 0.1),
        );
        AnalyticScene::empty(Aabb::cube(3.0))
            .with_primitive(
                Primitive::sphere(Vector3::new(-0.5, 0.2, 0.0), 0.6, 8.0, [0.9, 0.2, 0.1])
                    .with_softness(0.1)
                    .with_texture(0.5, 6.0),
            )
            .with_primitive(Primitive::cuboid(tilt, [0.4, 0.3, 0.5], 12.0, [0.1, 0.8, 0.3]).with_softness(0.08))
            .with_primitive(
                Primitive::cylinder(Pose::from_yaw(0.4, Vector3::new(0.0, 0.9, -0.3)), 0.3, 0.7, 5.0, [0.2, 0.3, 0.9])
                    .with_softness(0.05)
                    .with_texture(0.8, 9.0),
            )
    }

    fn fd_gradient(f: impl Fn(&Vector3<f64>) -> f64, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-4;
        Vector3::from_fn(|i, _| {
            let mut a = *p;
            let mut b = *p;
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
    }

    #[test]
    fn empty_scene_has_no_density() {
        let s = AnalyticScene::empty(Aabb::cube(1.0));
        let p = Vector3::new(0.1, 0.2, 0.3);
        assert_eq!(s.density(&p), 0.0);
        assert_eq!(s.density_gradient(&p), Vector3::zeros());
        assert!(!s.occupied(&p));
    }

    #[test]
    fn sphere_center_and_surface() {
        let s = unit_sphere();
        assert_relative_eq!(s.density(&Vector3::zeros()), 10.0, epsilon = 1e-3);
        assert_relative_eq!(s.density(&Vector3::new(0.0, 1.0, 0.0)), 5.0, epsilon = 1e-12);
        assert!(s.occupied(&Vector3::zeros()));
    }

    #[test]
    fn gradient_points_inward() {
        let s = unit_sphere();
        let g = s.density_gradient(&Vector3::new(1.01, 0.0, 0.0));
        assert!(g.x < 0.0);
        assert_relative_eq!(g.y, 0.0);
        assert_relative_eq!(g.z, 0.0);
    }

    #[test]
    fn thin_shell_occupancy() {
        let s = unit_sphere();
        let n = Vector3::new(1.0, 2.0, -2.0).normalize();
        assert!(s.occupied(&(n * (1.0 - 1e-3))));
        assert!(!s.occupied(&(n * (1.0 + 1e-3))));
    }

    #[test]
    fn outside_bounds_is_empty() {
        let s = AnalyticScene::empty(Aabb::cube(1.0))
            .with_primitive(Primitive::sphere(Vector3::new(1.0, 0.0, 0.0), 0.5, 10.0, [1.0; 3]));
        let p = Vector3::new(1.2, 0.0, 0.0);
        assert_eq!(s.density(&p), 0.0);
        assert!(!s.occupied(&p));
    }

    #[test]
    fn density_and_color_gradients_match_finite_differences() {
        let s = composite();
        let d = Vector3::z();
        let mut checked = 0;
        for p in [
            Vector3::new(-0.3, 0.5, 0.3),
            Vector3::new(0.35, -0.1, 0.2),
            Vector3::new(0.2, 0.65, -0.2),
            Vector3::new(-0.9, -0.2, 0.4),
            Vector3::new(0.5, 0.3, -0.35),
        ] {
            let fd = fd_gradient(|q| s.density(q), &p);
            let sd = s.sample_with_derivatives(&p, &d);
            assert!((sd.density_grad - fd).norm() <= 1e-3 * fd.norm().max(1e-6), "{p:?}");
            for c in 0..3 {
                let fdc = fd_gradient(|q| s.sample(q, &d).color[c], &p);
                let an = sd.color_pos_jac.row(c).transpose();
                assert!((an - fdc).norm() <= 1e-3 * fdc.norm().max(1e-3), "{p:?} channel {c}");
            }
            checked += 1;
        }
        assert_eq!(checked, 5);
    }

    #[test]
    fn scene_json_round_trip() {
        let s = composite();
        let back = AnalyticScene::from_json(&s.to_json()).unwrap();
        assert_eq!(back.primitives.len(), 3);
        let p = Vector3::new(0.1, 0.2, 0.3);
        assert_relative_eq!(back.density(&p), s.density(&p), epsilon = 1e-12);
    }

    #[test]
    fn scene_json_defaults() {
        let json = r#"{"format_version":1,"bounds":{"min":[-1,-1,-1],"max":[1,1,1]},
            "primitives":[{"shape":{"type":"sphere","radius":0.5},"peak_density":4,"albedo":[1,1,1]}]}"#;
        let s = AnalyticScene::from_json(json).unwrap();
        assert_eq!(s.background, [0.5; 3]);
        assert_relative_eq!(s.primitives[0].beta(), 0.01);
        assert!(AnalyticScene::from_json(&json.replace("\"format_version\":1", "\"format_version\":9")).is_err());
    }

    proptest! {
        #[test]
        fn density_tail_bounds(x in -2.5f64..2.5, y in -2.5f64..2.5, z in -2.5f64..2.5) {
            let s = composite();
            let p = Vector3::new(x, y, z);
            for prim in &s.primitives {
                let single = AnalyticScene { primitives: vec![prim.clone()], ..s.clone() };
                let rho = single.density(&p);
                prop_assert!(rho >= 0.0);
                if rho > prim.peak_density / 2.0 {
                    prop_assert!(single.occupied(&p));
                }
                if prim.signed_distance(&p) > 3.0 * prim.beta() {
                    prop_assert!(rho < 0.05 * prim.peak_density);
                }
            }
            let c = s.color(&p, &Vector3::z());
            prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

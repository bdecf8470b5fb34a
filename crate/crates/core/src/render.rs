//! Volumetric ray marching: expected pixel colors and their derivatives with
//! respect to the camera pose.
//!
//! Samples are stratified in `[near, far]`; the jitter inside each bin comes
//! from a generator keyed by `(seed, pixel index)`, so rendering a subset of
//! pixels gives exactly the values of a full render.

use crate::exec::ExecPolicy;
use crate::field::RadianceField;
use crate::geom::{hat, Pose};
use crate::seed::{rng_from, substream};
use nalgebra::{Matrix3, Matrix3x6, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const IMAGE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("pixel index {index} outside a {width}x{height} image")]
    PixelOutOfRange { index: usize, width: usize, height: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed image file: {0}")]
    Format(String),
}

/// Pinhole camera. In its own frame it looks down −z with +x to the right and
/// +y towards increasing pixel rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_near() -> f64 {
    0.05
}

fn default_far() -> f64 {
    6.0
}

impl Default for Camera {
    fn default() -> Self {
        Self::square(100, 100.0)
    }
}

impl Camera {
    /// `size × size` image with the principal point at the center.
    pub fn square(size: usize, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
            near: default_near(),
            far: default_far(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64
            && self.near >= 0.0
            && self.near < self.far;
        if ok {
            Ok(())
        } else {
            Err(RenderError::InvalidCamera(format!("{self:?}")))
        }
    }

    /// Unit ray direction in the camera frame through the center of pixel `i`.
    pub fn direction(&self, i: usize) -> Result<Vector3<f64>, RenderError> {
        if i >= self.pixel_count() {
            return Err(RenderError::PixelOutOfRange {
                index: i,
                width: self.width,
                height: self.height,
            });
        }
        let (row, col) = (i / self.width, i % self.width);
        let u = col as f64 + 0.5;
        let v = row as f64 + 0.5;
        Ok(Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, -1.0).normalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// World-frame ray through pixel `i` of a camera at `pose` (camera → world).
pub fn pixel_ray(camera: &Camera, pose: &Pose, i: usize) -> Result<Ray, RenderError> {
    let d = camera.direction(i)?;
    Ok(Ray {
        origin: pose.translation,
        direction: pose.rotation * d,
        near: camera.near,
        far: camera.far,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub n_samples: usize,
    pub background: [f64; 3],
    /// Seed of the stratified jitter; `None` places samples at bin midpoints.
    pub jitter_seed: Option<u64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_samples: 128,
            background: [0.5; 3],
            jitter_seed: None,
        }
    }
}

impl RenderOptions {
    pub fn background(&self) -> Vector3<f64> {
        Vector3::from(self.background)
    }
}

/// Sample depths for one ray. Bin `k` covers `[near + kδ, near + (k+1)δ)`.
fn sample_depths(ray: &Ray, n: usize, jitter: Option<(u64, usize)>) -> (Vec<f64>, f64) {
    let delta = (ray.far - ray.near) / n as f64;
    let depths = match jitter {
        Some((seed, pixel)) => {
            let mut rng = rng_from(substream(seed, pixel as u64));
            (0..n)
                .map(|k| ray.near + (k as f64 + rng.random::<f64>()) * delta)
                .collect()
        }
        None => (0..n).map(|k| ray.near + (k as f64 + 0.5) * delta).collect(),
    };
    (depths, delta)
}

/// Per-sample compositing weights `T_k α_k` along a ray.
pub fn sample_weights(field: &dyn RadianceField, ray: &Ray, n_samples: usize, jitter: Option<(u64, usize)>) -> Vec<f64> {
    let (depths, delta) = sample_depths(ray, n_samples, jitter);
    let mut trans = 1.0;
    depths
        .iter()
        .map(|&t| {
            let alpha = 1.0 - (-field.density(&ray.at(t)) * delta).exp();
            let w = trans * alpha;
            trans *= 1.0 - alpha;
            w
        })
        .collect()
}

/// Quadrature of the volume-rendering integral with the background
/// composited behind the residual transmittance.
pub fn render_ray(
    field: &dyn RadianceField,
    ray: &Ray,
    n_samples: usize,
    background: &Vector3<f64>,
    jitter: Option<(u64, usize)>,
) -> Vector3<f64> {
    let (depths, delta) = sample_depths(ray, n_samples, jitter);
    let mut trans = 1.0;
    let mut color = Vector3::zeros();
    for &t in &depths {
        let s = field.sample(&ray.at(t), &ray.direction);
        if s.density <= 0.0 {
            continue;
        }
        let alpha = 1.0 - (-s.density * delta).exp();
        color += s.color * (trans * alpha);
        trans *= 1.0 - alpha;
    }
    (color + background * trans).map(|c| c.clamp(0.0, 1.0))
}

/// Color of a single ray with midpoint samples and the given background.
pub fn render_pixel(field: &dyn RadianceField, ray: &Ray, n_samples: usize, background: &Vector3<f64>) -> Vector3<f64> {
    render_ray(field, ray, n_samples, background, None)
}

fn jitter_key(opts: &RenderOptions, i: usize) -> Option<(u64, usize)> {
    opts.jitter_seed.map(|s| (s, i))
}

/// Colors of the listed pixels, in the listed order.
pub fn render_pixels(
    field: &dyn RadianceField,
    camera: &Camera,
    pose: &Pose,
    opts: &RenderOptions,
    pixels: &[usize],
    policy: ExecPolicy,
) -> Result<Vec<Vector3<f64>>, RenderError> {
    if let Some(&bad) = pixels.iter().find(|&&i| i >= camera.pixel_count()) {
        return Err(RenderError::PixelOutOfRange {
            index: bad,
            width: camera.width,
            height: camera.height,
        });
    }
    let bg = opts.background();
    Ok(policy.map_slice(pixels, |&i| {
        let ray = pixel_ray(camera, pose, i).expect("index checked");
        render_ray(field, &ray, opts.n_samples, &bg, jitter_key(opts, i))
    }))
}

/// An RGB image in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vector3<f64>>,
    /// Which pixels were rendered, for subset renders.
    pub mask: Option<Vec<bool>>,
}

impl RenderedImage {
    pub fn filled(width: usize, height: usize, color: Vector3<f64>) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
            mask: None,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> Vector3<f64> {
        self.pixels[row * self.width + col]
    }

    /// Luma (Rec. 601 weights).
    pub fn grayscale(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|c| 0.299 * c.x + 0.587 * c.y + 0.114 * c.z)
            .collect()
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<(), RenderError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|c| c.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect::<Vec<_>>())
            .collect();
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self, RenderError> {
        let data = std::fs::read(path)?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(RenderError::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&data[start..pos]).to_string());
        }
        pos += 1;
        let parse = |s: &str| s.parse::<usize>().map_err(|_| RenderError::Format(format!("bad PPM field {s}")));
        if fields[0] != "P6" || parse(&fields[3])? != 255 {
            return Err(RenderError::Format("only 8-bit P6 is supported".into()));
        }
        let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
        let body = data.get(pos..pos + 3 * w * h).ok_or_else(|| RenderError::Format("truncated PPM body".into()))?;
        let pixels = body
            .chunks(3)
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
            .collect();
        Ok(Self {
            width: w,
            height: h,
            pixels,
            mask: None,
        })
    }

    /// Little-endian float32 RGB, row-major, plus a `<path>.json` sidecar.
    pub fn write_raw(&self, path: impl AsRef<Path>, pose: &Pose, seed: u64) -> Result<(), RenderError> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for c in &self.pixels {
            for v in c.iter() {
                f.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
        let side = ImageSidecar {
            format_version: IMAGE_FORMAT_VERSION,
            width: self.width,
            height: self.height,
            pose: *pose,
            seed,
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<(Self, ImageSidecar), RenderError> {
        let path = path.as_ref();
        let side: ImageSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != side.width * side.height * 12 {
            return Err(RenderError::Format(format!(
                "expected {} bytes, found {}",
                side.width * side.height * 12,
                bytes.len()
            )));
        }
        let pixels = bytes
            .chunks(12)
            .map(|c| {
                Vector3::from_fn(|i, _| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64)
            })
            .collect();
        Ok((
            Self {
                width: side.width,
                height: side.height,
                pixels,
                mask: None,
            },
            side,
        ))
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub pose: Pose,
    pub seed: u64,
}

/// Render every pixel, or only `subset` (other pixels are left black and
/// masked out).
pub fn render_image(
    field: &dyn RadianceField,
    camera: &Camera,
    pose: &Pose,
    opts: &RenderOptions,
    subset: Option<&[usize]>,
    policy: ExecPolicy,
) -> Result<RenderedImage, RenderError> {
    camera.validate()?;
    let n = camera.pixel_count();
    match subset {
        None => {
            let all: Vec<usize> = (0..n).collect();
            let pixels = render_pixels(field, camera, pose, opts, &all, policy)?;
            Ok(RenderedImage {
                width: camera.width,
                height: camera.height,
                pixels,
                mask: None,
            })
        }
        Some(idx) => {
            let colors = render_pixels(field, camera, pose, opts, idx, policy)?;
            let mut img = RenderedImage::filled(camera.width, camera.height, Vector3::zeros());
            let mut mask = vec![false; n];
            for (&i, c) in idx.iter().zip(colors) {
                img.pixels[i] = c;
                mask[i] = true;
            }
            img.mask = Some(mask);
            Ok(img)
        }
    }
}

/// Color of pixel `i` and its derivative with respect to the left increment
/// `δ = (ω, v)` of the camera pose, `pose ↦ exp(δ) ∘ pose`, at `δ = 0`.
///
/// Uses the same sample depths as the primal render.
pub fn render_ray_with_jacobian(
    field: &dyn RadianceField,
    ray: &Ray,
    n_samples: usize,
    background: &Vector3<f64>,
    jitter: Option<(u64, usize)>,
) -> (Vector3<f64>, Matrix3x6<f64>) {
    let (depths, delta) = sample_depths(ray, n_samples, jitter);
    let d_hat = hat(&ray.direction);
    // ∂d/∂δ = [−d^, 0]
    let mut dd = Matrix3x6::zeros();
    dd.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-d_hat));
    let mut trans = 1.0;
    let mut trans_dot = nalgebra::RowVector6::<f64>::zeros();
    let mut color = Vector3::zeros();
    let mut jac = Matrix3x6::zeros();
    for &t in &depths {
        let p = ray.at(t);
        let s = field.sample_with_derivatives(&p, &ray.direction);
        if s.density <= 0.0 && s.density_grad == Vector3::zeros() {
            continue;
        }
        // ∂p/∂δ = [−p^, I]
        let mut dp = Matrix3x6::zeros();
        dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&p)));
        dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        let rho_dot = s.density_grad.transpose() * dp;
        let c_dot = s.color_pos_jac * dp + s.color_dir_jac * dd;
        let decay = (-s.density * delta).exp();
        let alpha = 1.0 - decay;
        let alpha_dot = rho_dot * (decay * delta);
        color += s.color * (trans * alpha);
        jac += s.color * (trans_dot * alpha + alpha_dot * trans) + c_dot * (trans * alpha);
        trans_dot = trans_dot * (1.0 - alpha) - alpha_dot * trans;
        trans *= 1.0 - alpha;
    }
    color += background * trans;
    jac += background * trans_dot;
    (color, jac)
}

/// Pose Jacobian of pixel `i` (3×6, columns ordered rotation then translation).
pub fn render_pixel_pose_jacobian(
    field: &dyn RadianceField,
    camera: &Camera,
    pose: &Pose,
    i: usize,
    opts: &RenderOptions,
) -> Result<Matrix3x6<f64>, RenderError> {
    let ray = pixel_ray(camera, pose, i)?;
    Ok(render_ray_with_jacobian(field, &ray, opts.n_samples, &opts.background(), jitter_key(opts, i)).1)
}

/// Colors and pose Jacobians for a pixel set.
pub fn render_pixels_with_jacobian(
    field: &dyn RadianceField,
    camera: &Camera,
    pose: &Pose,
    opts: &RenderOptions,
    pixels: &[usize],
    policy: ExecPolicy,
) -> Result<Vec<(Vector3<f64>, Matrix3x6<f64>)>, RenderError> {
    if let Some(&bad) = pixels.iter().find(|&&i| i >= camera.pixel_count()) {
        return Err(RenderError::PixelOutOfRange {
            index: bad,
            width: camera.width,
            height: camera.height,
        });
    }
    let bg = opts.background();
    Ok(policy.map_slice(pixels, |&i| {
        let ray = pixel_ray(camera, pose, i).expect("index checked");
        render_ray_with_jacobian(field, &ray, opts.n_samples, &bg, jitter_key(opts, i))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Aabb, AnalyticScene, Primitive, UniformField};
    use crate::geom::Twist;
    use approx::assert_relative_eq;

    fn homogeneous(rho: f64, c: Vector3<f64>) -> UniformField {
        UniformField {
            bounds: Aabb::cube(100.0),
            density: rho,
            color: c,
        }
    }

    #[test]
    fn principal_ray_looks_down_minus_z() {
        let cam = Camera::square(100, 100.0);
        // pixel (row 49, col 49) has center (49.5, 49.5); use an even-offset camera instead
        let cam2 = Camera { cx: 49.5, cy: 49.5, ..cam };
        let r = pixel_ray(&cam2, &Pose::identity(), 49 * 100 + 49).unwrap();
        assert_relative_eq!(r.direction, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
    }

    #[test]
    fn one_focal_length_offset() {
        let cam = Camera { cx: 9.5, cy: 9.5, fx: 5.0, fy: 5.0, ..Camera::square(20, 5.0) };
        // column 14 → u = 14.5 = cx + fx
        let r = pixel_ray(&cam, &Pose::identity(), 9 * 20 + 14).unwrap();
        assert_relative_eq!(r.direction, Vector3::new(1.0, 0.0, -1.0).normalize(), epsilon = 1e-15);
    }

    #[test]
    fn translation_moves_origin_only() {
        let cam = Camera::square(10, 10.0);
        let t = Vector3::new(1.0, -2.0, 3.0);
        let a = pixel_ray(&cam, &Pose::identity(), 17).unwrap();
        let b = pixel_ray(&cam, &Pose::from_translation(t), 17).unwrap();
        assert_eq!(b.origin, t);
        assert_eq!(a.direction, b.direction);
        assert!(matches!(pixel_ray(&cam, &Pose::identity(), 100), Err(RenderError::PixelOutOfRange { .. })));
    }

    #[test]
    fn empty_field_black_background() {
        let f = AnalyticScene::empty(Aabb::cube(1.0));
        let cam = Camera::square(2, 2.0);
        let opts = RenderOptions { background: [0.0; 3], ..Default::default() };
        let img = render_image(&f, &cam, &Pose::identity(), &opts, None, ExecPolicy::Sequential).unwrap();
        assert!(img.pixels.iter().all(|c| *c == Vector3::zeros()));
    }

    #[test]
    fn homogeneous_medium_closed_form() {
        let c = Vector3::new(0.2, 0.6, 0.9);
        let rho = 0.7;
        let f = homogeneous(rho, c);
        let ray = Ray { origin: Vector3::zeros(), direction: Vector3::x(), near: 0.5, far: 3.5 };
        let expected = c * (1.0 - (-rho * 3.0f64).exp());
        let got = render_pixel(&f, &ray, 256, &Vector3::zeros());
        assert!((got - expected).norm() <= 0.01 * expected.norm());
        let w = sample_weights(&f, &ray, 256, Some((3, 0)));
        assert!(w.iter().all(|w| (0.0..=1.0).contains(w)));
        assert!(w.iter().sum::<f64>() <= 1.0);
    }

    #[test]
    fn opaque_wall_fills_pixel() {
        let f = homogeneous(1e4, Vector3::new(1.0, 0.0, 0.0));
        let ray = Ray { origin: Vector3::zeros(), direction: Vector3::x(), near: 0.1, far: 2.0 };
        let got = render_pixel(&f, &ray, 64, &Vector3::repeat(0.5));
        assert_relative_eq!(got, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-3);
    }

    #[test]
    fn subset_matches_full_render() {
        let f = AnalyticScene::empty(Aabb::cube(3.0))
            .with_primitive(Primitive::sphere(Vector3::new(0.0, 0.0, -2.0), 0.5, 20.0, [0.9, 0.3, 0.1]).with_texture(0.5, 8.0));
        let cam = Camera::square(16, 16.0);
        let opts = RenderOptions { jitter_seed: Some(42), n_samples: 32, ..Default::default() };
        let full = render_image(&f, &cam, &Pose::identity(), &opts, None, ExecPolicy::Parallel).unwrap();
        let subset = [3usize, 77, 128, 200, 255];
        let part = render_image(&f, &cam, &Pose::identity(), &opts, Some(&subset), ExecPolicy::Sequential).unwrap();
        for &i in &subset {
            assert_eq!(full.pixels[i], part.pixels[i]);
        }
    }

    #[test]
    fn sphere_on_axis_is_brighter_in_center() {
        let f = AnalyticScene::empty(Aabb::cube(3.0))
            .with_primitive(Primitive::sphere(Vector3::new(0.0, 0.0, -2.0), 0.5, 20.0, [1.0, 1.0, 1.0]))
            .with_background([0.0; 3]);
        let cam = Camera::square(16, 16.0);
        let opts = RenderOptions { background: [0.0; 3], n_samples: 64, ..Default::default() };
        let img = render_image(&f, &cam, &Pose::identity(), &opts, None, ExecPolicy::Parallel).unwrap();
        let center = img.pixel(8, 8).sum();
        for (r, c) in [(0, 0), (0, 15), (15, 0), (15, 15)] {
            assert!(center > img.pixel(r, c).sum() + 0.5);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_near_sphere() {
        let f = AnalyticScene::empty(Aabb::cube(3.0)).with_primitive(
            Primitive::sphere(Vector3::new(0.1, -0.1, -1.5), 0.5, 15.0, [0.9, 0.4, 0.2])
                .with_softness(0.08)
                .with_texture(0.6, 5.0),
        );
        let cam = Camera::square(12, 12.0);
        let pose = Pose::exp(&Twist::new(Vector3::new(0.05, -0.03, 0.02), Vector3::new(0.02, 0.05, -0.1)));
        let opts = RenderOptions { n_samples: 96, jitter_seed: Some(9), ..Default::default() };
        let h = 1e-4;
        for i in [40usize, 66, 78, 100] {
            let jac = render_pixel_pose_jacobian(&f, &cam, &pose, i, &opts).unwrap();
            for k in 0..6 {
                let mut e = nalgebra::Vector6::zeros();
                e[k] = h;
                let plus = pose.retract(&Twist::from_vector(&e));
                let minus = pose.retract(&Twist::from_vector(&-e));
                let cp = render_pixels(&f, &cam, &plus, &opts, &[i], ExecPolicy::Sequential).unwrap()[0];
                let cm = render_pixels(&f, &cam, &minus, &opts, &[i], ExecPolicy::Sequential).unwrap()[0];
                let fd = (cp - cm) / (2.0 * h);
                for ch in 0..3 {
                    if fd[ch].abs() > 1e-6 {
                        assert!((jac[(ch, k)] - fd[ch]).abs() <= 1e-2 * fd[ch].abs(), "pixel {i} dir {k} ch {ch}: {} vs {}", jac[(ch, k)], fd[ch]);
                    }
                }
            }
        }
    }

    #[test]
    fn raw_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RenderedImage::filled(3, 2, Vector3::new(0.25, 0.5, 1.0));
        img.pixels[4] = Vector3::new(0.0, 0.1, 0.9);
        let pose = Pose::from_yaw(0.2, Vector3::new(1.0, 2.0, 3.0));
        let raw = dir.path().join("img.f32");
        img.write_raw(&raw, &pose, 17).unwrap();
        let (back, side) = RenderedImage::read_raw(&raw).unwrap();
        assert_eq!(side.seed, 17);
        assert_eq!(side.width, 3);
        assert_relative_eq!(back.pixels[4], img.pixels[4], epsilon = 1e-7);
        let ppm = dir.path().join("img.ppm");
        img.write_ppm(&ppm).unwrap();
        let bytes = std::fs::read(&ppm).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        let p = RenderedImage::read_ppm(&ppm).unwrap();
        assert_relative_eq!(p.pixels[0], Vector3::new(64.0, 128.0, 255.0) / 255.0);
    }
}

//! Recursive pose filter: dynamics prediction followed by a MAP correction
//! against rendered pixels.
//!
//! The correction minimizes
//! `‖h(x) − z‖²_{S⁻¹} + ‖x ⊖ μ̄‖²_{Σ̄⁻¹}` with damped Gauss-Newton. Every step
//! is applied through the retraction `x ← x ⊞ δ`, and the posterior
//! covariance is the inverse Gauss-Newton Hessian at the optimum.

use crate::dynamics::{dynamics_jacobian, state_difference, state_retract, step, Control, FullState, Robot, StateMatrix};
use crate::exec::ExecPolicy;
use crate::field::RadianceField;
use crate::geom::{hat, rotation_angle, GeomError, Pose, NEAR_PI_MARGIN};
use crate::render::{render_pixels_with_jacobian, Camera, RenderError, RenderOptions, RenderedImage};
use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

pub type StateVector = SVector<f64, 12>;
pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("prior covariance is not positive definite")]
    SingularPrior,
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

mod rowmajor12 {
    use super::StateMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &StateMatrix, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<f64> = (0..144).map(|k| m[(k / 12, k % 12)]).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<StateMatrix, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 144 {
            return Err(serde::de::Error::invalid_length(v.len(), &"144 entries"));
        }
        Ok(StateMatrix::from_row_slice(&v))
    }
}

/// Gaussian state estimate; the covariance lives in the tangent space
/// `(δθ, δp, δv, δω)` at the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub mean: FullState,
    #[serde(with = "rowmajor12")]
    pub cov: StateMatrix,
}

impl Belief {
    pub fn new(mean: FullState, cov: StateMatrix) -> Self {
        Self { mean, cov }.sanitized()
    }

    pub fn isotropic(mean: FullState, variance: f64) -> Self {
        Self::new(mean, StateMatrix::identity() * variance)
    }

    /// Symmetrized covariance with negative eigenvalues clamped to zero.
    pub fn sanitized(mut self) -> Self {
        let sym = (self.cov + self.cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < 0.0) {
            let clamped = eig.eigenvalues.map(|l| l.max(0.0));
            self.cov = &eig.eigenvectors * StateMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            self.cov = (self.cov + self.cov.transpose()) * 0.5;
        } else {
            self.cov = sym;
        }
        self
    }

    pub fn is_valid(&self) -> bool {
        let asym = (self.cov - self.cov.transpose()).abs().max();
        asym <= 1e-9 && self.cov.symmetric_eigen().eigenvalues.min() >= -1e-9 && self.mean.is_finite()
    }

    pub fn std_dev(&self) -> StateVector {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Predict through the noise-free dynamics: `μ⁻ = f(μ, u)`,
/// `Σ⁻ = A Σ Aᵀ + Q`.
pub fn propagate(belief: &Belief, u: &Control, robot: &Robot, q: &StateMatrix) -> Belief {
    let a = dynamics_jacobian(&belief.mean, u, robot);
    Belief::new(step(&belief.mean, u, robot), a * belief.cov * a.transpose() + q)
}

/// Structure-tensor interest score parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Weight of the tensor trace next to its smallest eigenvalue; lets
    /// straight edges score as well as corners.
    pub trace_weight: f64,
    /// Added to every score so flat regions keep a nonzero probability.
    pub floor: f64,
    /// Half-width of the summation window (px).
    pub window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            trace_weight: 0.5,
            floor: 1e-4,
            window: 1,
        }
    }
}

/// Per-pixel score `λ_min + w·trace + ε` of the grayscale structure tensor.
pub fn interest_scores(image: &RenderedImage, cfg: &DetectorConfig) -> Vec<f64> {
    let (w, h) = (image.width, image.height);
    let g = image.grayscale();
    let at = |r: isize, c: isize| g[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let k = r as usize * w + c as usize;
            ix[k] = 0.5 * (at(r, c + 1) - at(r, c - 1));
            iy[k] = 0.5 * (at(r + 1, c) - at(r - 1, c));
        }
    }
    let win = cfg.window as isize;
    let mut scores = vec![0.0; w * h];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
            for dr in -win..=win {
                for dc in -win..=win {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let k = rr as usize * w + cc as usize;
                    a += ix[k] * ix[k];
                    b += ix[k] * iy[k];
                    d += iy[k] * iy[k];
                }
            }
            let half_tr = 0.5 * (a + d);
            let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            let lmin = (half_tr - disc).max(0.0);
            scores[r as usize * w + c as usize] = lmin + cfg.trace_weight * (a + d) + cfg.floor;
        }
    }
    scores
}

/// Draw `budget` distinct pixels with probability proportional to their
/// interest score (Efraimidis–Spirakis keys). Returned in ascending order.
pub fn select_pixels<R: Rng + ?Sized>(image: &RenderedImage, budget: usize, cfg: &DetectorConfig, rng: &mut R) -> Vec<usize> {
    let n = image.width * image.height;
    if budget >= n {
        return (0..n).collect();
    }
    let scores = interest_scores(image, cfg);
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() / s, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = keyed[..budget].iter().map(|k| k.1).collect();
    out.sort_unstable();
    out
}

/// An observation model evaluated at a candidate state.
pub trait Measurement {
    fn observed(&self) -> &DVector<f64>;

    /// Residual entries per outlier-rejection group (e.g. 3 for RGB pixels).
    fn group_size(&self) -> usize {
        1
    }

    /// Prediction `h(x)` and its Jacobian with respect to the 12-D state
    /// tangent.
    fn predict(&self, x: &FullState) -> Result<(DVector<f64>, DMatrix<f64>), EstimatorError>;

    /// Prediction only.
    fn predict_value(&self, x: &FullState) -> Result<DVector<f64>, EstimatorError> {
        Ok(self.predict(x)?.0)
    }
}

/// `h(x) = H (x ⊖ origin) + offset`; linear in the chart at `origin`.
#[derive(Debug, Clone)]
pub struct LinearMeasurement {
    pub h: DMatrix<f64>,
    pub origin: FullState,
    pub offset: DVector<f64>,
    pub observed: DVector<f64>,
}

impl Measurement for LinearMeasurement {
    fn observed(&self) -> &DVector<f64> {
        &self.observed
    }

    fn predict(&self, x: &FullState) -> Result<(DVector<f64>, DMatrix<f64>), EstimatorError> {
        Ok((self.predict_value(x)?, self.h.clone()))
    }

    fn predict_value(&self, x: &FullState) -> Result<DVector<f64>, EstimatorError> {
        let e = state_difference(x, &self.origin);
        Ok(&self.h * DVector::from_column_slice(e.as_slice()) + &self.offset)
    }
}

/// Rendered colors of a pixel set from a body-mounted camera.
pub struct PhotometricMeasurement<'a> {
    pub field: &'a dyn RadianceField,
    pub camera: Camera,
    /// Camera → body transform.
    pub mount: Pose,
    pub render: RenderOptions,
    pub pixels: Vec<usize>,
    pub observed: DVector<f64>,
    pub policy: ExecPolicy,
}

impl<'a> PhotometricMeasurement<'a> {
    pub fn new(
        field: &'a dyn RadianceField,
        camera: Camera,
        mount: Pose,
        render: RenderOptions,
        image: &RenderedImage,
        pixels: Vec<usize>,
        policy: ExecPolicy,
    ) -> Self {
        let observed = DVector::from_iterator(pixels.len() * 3, pixels.iter().flat_map(|&i| image.pixels[i].iter().copied().collect::<Vec<_>>()));
        Self {
            field,
            camera,
            mount,
            render,
            pixels,
            observed,
            policy,
        }
    }
}

impl Measurement for PhotometricMeasurement<'_> {
    fn observed(&self) -> &DVector<f64> {
        &self.observed
    }

    fn group_size(&self) -> usize {
        3
    }

    fn predict(&self, x: &FullState) -> Result<(DVector<f64>, DMatrix<f64>), EstimatorError> {
        let cam = x.pose * self.mount;
        let rendered = render_pixels_with_jacobian(self.field, &self.camera, &cam, &self.render, &self.pixels, self.policy)?;
        let m = self.pixels.len() * 3;
        let mut value = DVector::zeros(m);
        let mut jac = DMatrix::zeros(m, 12);
        // A left increment (δθ, δp) of the body is the camera increment
        // (δθ, δp + p^ δθ).
        let p_hat = hat(&x.pose.translation);
        for (k, (c, j)) in rendered.iter().enumerate() {
            let j_rot: Matrix3<f64> = j.fixed_view::<3, 3>(0, 0).into_owned();
            let j_trans: Matrix3<f64> = j.fixed_view::<3, 3>(0, 3).into_owned();
            value.fixed_rows_mut::<3>(3 * k).copy_from(c);
            jac.fixed_view_mut::<3, 3>(3 * k, 0).copy_from(&(j_rot + j_trans * p_hat));
            jac.fixed_view_mut::<3, 3>(3 * k, 3).copy_from(&j_trans);
        }
        Ok((value, jac))
    }

    fn predict_value(&self, x: &FullState) -> Result<DVector<f64>, EstimatorError> {
        let cam = x.pose * self.mount;
        let colors = crate::render::render_pixels(self.field, &self.camera, &cam, &self.render, &self.pixels, self.policy)?;
        Ok(DVector::from_iterator(colors.len() * 3, colors.iter().flat_map(|c| [c.x, c.y, c.z])))
    }
}

/// Camera looking along body +x, image columns to the body's right.
pub fn default_camera_mount() -> Pose {
    Pose::new(
        Matrix3::new(0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        Vector3::zeros(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Diagonal of the process noise Q.
    pub process_noise: [f64; 12],
    /// Scalar measurement variance (S = s·I); `inf` disables the image.
    pub measurement_noise: f64,
    /// Multiplier on the process term; 0 gives the photometric-only baseline.
    pub process_weight: f64,
    pub pixel_budget: usize,
    pub max_iterations: usize,
    /// Stop when the tangent step norm falls below this.
    pub step_tolerance: f64,
    pub initial_damping: f64,
    /// Residual groups above this quantile are dropped each iteration.
    pub outlier_quantile: f64,
    /// Draw a new pixel set before every solver iteration.
    pub resample_pixels_each_step: bool,
    /// Sum tangent steps and retract once from the prior instead of
    /// retracting after every step.
    pub accumulate_tangent: bool,
    pub detector: DetectorConfig,
    pub camera: Camera,
    pub camera_mount: Pose,
    pub render: RenderOptions,
    pub policy: ExecPolicy,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            process_noise: [0.1; 12],
            measurement_noise: 1.0,
            process_weight: 1.0,
            pixel_budget: 256,
            max_iterations: 30,
            step_tolerance: 1e-9,
            initial_damping: 1e-6,
            outlier_quantile: 0.9,
            resample_pixels_each_step: false,
            accumulate_tangent: false,
            detector: DetectorConfig::default(),
            camera: Camera::default(),
            camera_mount: default_camera_mount(),
            render: RenderOptions {
                n_samples: 64,
                ..RenderOptions::default()
            },
            policy: ExecPolicy::default(),
        }
    }
}

impl FilterConfig {
    pub fn q(&self) -> StateMatrix {
        StateMatrix::from_diagonal(&StateVector::from_row_slice(&self.process_noise))
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::InvalidConfig(m.into()));
        if self.process_noise.iter().any(|q| !(*q >= 0.0)) {
            return bad("process noise must be non-negative");
        }
        if !(self.measurement_noise > 0.0) {
            return bad("measurement noise must be positive");
        }
        if !(self.process_weight >= 0.0) {
            return bad("process weight must be non-negative");
        }
        if self.pixel_budget < 6 {
            return bad("pixel budget must be at least 6");
        }
        if !(0.0..=1.0).contains(&self.outlier_quantile) || self.outlier_quantile == 0.0 {
            return bad("outlier quantile must lie in (0, 1]");
        }
        self.camera.validate()?;
        Ok(())
    }

    /// The photometric-only baseline: identical machinery, no process term.
    pub fn baseline(&self) -> Self {
        Self {
            process_weight: 0.0,
            ..self.clone()
        }
    }
}

/// Result of one correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    pub belief: Belief,
    pub iterations: usize,
    pub measurement_loss: f64,
    pub process_loss: f64,
    /// The Hessian was singular; the predicted covariance was kept.
    pub low_information: bool,
}

/// Keep mask for residual groups at or below the quantile.
fn inlier_mask(residual: &DVector<f64>, group: usize, quantile: f64) -> Vec<bool> {
    let n = residual.len() / group;
    let energy: Vec<f64> = (0..n)
        .map(|k| residual.rows(k * group, group).norm_squared())
        .collect();
    if quantile >= 1.0 || n == 0 {
        return vec![true; n];
    }
    let mut sorted = energy.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted[((quantile * n as f64).ceil() as usize).clamp(1, n) - 1];
    energy.iter().map(|&e| e <= cut).collect()
}

fn masked_sq(residual: &DVector<f64>, mask: &[bool], group: usize) -> f64 {
    mask.iter()
        .enumerate()
        .filter(|(_, &keep)| keep)
        .map(|(k, _)| residual.rows(k * group, group).norm_squared())
        .sum()
}

struct Objective<'a, M: ?Sized> {
    meas: &'a M,
    prior: &'a Belief,
    prior_info: StateMatrix,
    w_meas: f64,
    w_proc: f64,
    dims: usize,
}

impl<M: Measurement + ?Sized> Objective<'_, M> {
    fn process_loss(&self, x: &FullState) -> f64 {
        let e = state_difference(x, &self.prior.mean);
        self.w_proc * (e.transpose() * self.prior_info * e)[0]
    }

    fn loss(&self, x: &FullState, mask: &[bool]) -> Result<(f64, f64), EstimatorError> {
        let m = if self.w_meas > 0.0 {
            let r = self.meas.predict_value(x)? - self.meas.observed();
            self.w_meas * masked_sq(&r, mask, self.meas.group_size())
        } else {
            0.0
        };
        Ok((m, self.process_loss(x)))
    }

    /// Gradient and Gauss-Newton Hessian over the first `dims` tangent
    /// coordinates, plus the inlier mask and losses at `x`.
    #[allow(clippy::type_complexity)]
    fn linearize(
        &self,
        x: &FullState,
        quantile: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>, Vec<bool>, f64, f64), EstimatorError> {
        let d = self.dims;
        let mut g = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        let group = self.meas.group_size();
        let mut mask = vec![true; self.meas.observed().len() / group];
        let mut meas_loss = 0.0;
        if self.w_meas > 0.0 {
            let (pred, jac) = self.meas.predict(x)?;
            let r = pred - self.meas.observed();
            mask = inlier_mask(&r, group, quantile);
            meas_loss = self.w_meas * masked_sq(&r, &mask, group);
            for (k, &keep) in mask.iter().enumerate() {
                if !keep {
                    continue;
                }
                let jk = jac.view((k * group, 0), (group, d));
                let rk = r.rows(k * group, group);
                g += jk.transpose() * rk * self.w_meas;
                hess += jk.transpose() * jk * self.w_meas;
            }
        }
        if self.w_proc > 0.0 {
            let e = state_difference(x, &self.prior.mean);
            let info = self.prior_info.view((0, 0), (d, d)) * self.w_proc;
            g += &info * e.rows(0, d);
            hess += info;
        }
        Ok((g, hess, mask, meas_loss, self.process_loss(x)))
    }
}

fn retract_dims(x: &FullState, delta: &DVector<f64>) -> FullState {
    let mut full = StateVector::zeros();
    full.rows_mut(0, delta.len()).copy_from(delta);
    state_retract(x, &full)
}

/// MAP correction of a predicted belief.
///
/// With `process_weight = 0` only the pose is estimated; velocities keep
/// their predicted values and covariance.
pub fn update<M: Measurement + ?Sized>(prior: &Belief, meas: &M, cfg: &FilterConfig) -> Result<UpdateOutcome, EstimatorError> {
    update_from(prior, prior.mean, meas, cfg)
}

/// [`update`] with the solver started at `start` instead of the prior mean.
pub fn update_from<M: Measurement + ?Sized>(
    prior: &Belief,
    start: FullState,
    meas: &M,
    cfg: &FilterConfig,
) -> Result<UpdateOutcome, EstimatorError> {
    cfg.validate()?;
    let w_meas = if cfg.measurement_noise.is_finite() {
        1.0 / cfg.measurement_noise
    } else {
        0.0
    };
    if w_meas == 0.0 {
        return Ok(UpdateOutcome {
            belief: *prior,
            iterations: 0,
            measurement_loss: 0.0,
            process_loss: 0.0,
            low_information: false,
        });
    }
    let prior_info = if cfg.process_weight > 0.0 {
        prior.cov.cholesky().ok_or(EstimatorError::SingularPrior)?.inverse()
    } else {
        StateMatrix::zeros()
    };
    let obj = Objective {
        meas,
        prior,
        prior_info,
        w_meas,
        w_proc: cfg.process_weight,
        dims: if cfg.process_weight > 0.0 { 12 } else { 6 },
    };
    let mut x = start;
    let mut accumulated = DVector::zeros(obj.dims);
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let (g, hess, mask, meas_loss, proc_loss) = obj.linearize(&x, cfg.outlier_quantile)?;
        let current = meas_loss + proc_loss;
        let mut accepted = None;
        for _ in 0..12 {
            let mut damped = hess.clone();
            for i in 0..obj.dims {
                damped[(i, i)] += lambda * hess[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let candidate = if cfg.accumulate_tangent {
                retract_dims(&start, &(&accumulated + &delta))
            } else {
                retract_dims(&x, &delta)
            };
            let (m, p) = obj.loss(&candidate, &mask)?;
            if m + p <= current {
                accepted = Some((candidate, delta));
                lambda = (lambda * 0.1).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        let Some((next, delta)) = accepted else { break };
        x = next;
        accumulated += &delta;
        if delta.norm() < cfg.step_tolerance {
            break;
        }
    }
    let angle = rotation_angle(&(x.pose.rotation * prior.mean.pose.rotation.transpose()));
    if angle > std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(GeomError::AngleNearPi { angle }.into());
    }
    let (_, hess, _, measurement_loss, process_loss) = obj.linearize(&x, cfg.outlier_quantile)?;
    let d = obj.dims;
    let inverse = hess
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .filter(|inv| inv.iter().all(|v| v.is_finite()) && hess.rcond_estimate() > 1e-14);
    let (cov, low_information) = match inverse {
        Some(inv) => {
            let mut cov = prior.cov;
            if d < 12 {
                cov.view_mut((0, d), (d, 12 - d)).fill(0.0);
                cov.view_mut((d, 0), (12 - d, d)).fill(0.0);
            }
            cov.view_mut((0, 0), (d, d)).copy_from(&inv);
            (cov, false)
        }
        None => (prior.cov, true),
    };
    if d < 12 {
        x.velocity = prior.mean.velocity;
        x.angular_velocity = prior.mean.angular_velocity;
    }
    Ok(UpdateOutcome {
        belief: Belief::new(x, cov),
        iterations,
        measurement_loss,
        process_loss,
        low_information,
    })
}

trait RcondEstimate {
    fn rcond_estimate(&self) -> f64;
}

impl RcondEstimate for DMatrix<f64> {
    /// Ratio of the smallest to largest diagonal of the Cholesky factor,
    /// squared.
    fn rcond_estimate(&self) -> f64 {
        match self.clone().cholesky() {
            Some(c) => {
                let l = c.l();
                let d = l.diagonal();
                let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                if hi == 0.0 {
                    0.0
                } else {
                    (lo / hi).powi(2)
                }
            }
            None => 0.0,
        }
    }
}

/// The photometric-only baseline update (no process term).
pub fn run_inerf_baseline<M: Measurement + ?Sized>(prior: &Belief, meas: &M, cfg: &FilterConfig) -> Result<UpdateOutcome, EstimatorError> {
    update(prior, meas, &cfg.baseline())
}

/// One timestep's filter log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub format_version: u32,
    pub t: usize,
    pub prior: Belief,
    pub posterior: Belief,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<FullState>,
    pub measurement_loss: f64,
    pub process_loss: f64,
    pub pixel_seed: u64,
    pub iterations: usize,
    pub low_information: bool,
}

/// Predict with `u`, pick pixels in `image`, and correct.
#[allow(clippy::too_many_arguments)]
pub fn filter_step(
    belief: &Belief,
    u: &Control,
    image: &RenderedImage,
    field: &dyn RadianceField,
    robot: &Robot,
    cfg: &FilterConfig,
    pixel_seed: u64,
    t: usize,
) -> Result<FilterRecord, EstimatorError> {
    let prior = propagate(belief, u, robot, &cfg.q());
    correct(&prior, image, field, cfg, pixel_seed, t)
}

/// Correction only, from an already predicted belief.
pub fn correct(
    prior: &Belief,
    image: &RenderedImage,
    field: &dyn RadianceField,
    cfg: &FilterConfig,
    pixel_seed: u64,
    t: usize,
) -> Result<FilterRecord, EstimatorError> {
    let mut rng = crate::seed::rng_from(pixel_seed);
    let measurement = |rng: &mut rand_chacha::ChaCha8Rng| {
        let pixels = select_pixels(image, cfg.pixel_budget, &cfg.detector, rng);
        PhotometricMeasurement::new(field, cfg.camera, cfg.camera_mount, cfg.render, image, pixels, cfg.policy)
    };
    let outcome = if cfg.resample_pixels_each_step {
        let single = FilterConfig {
            max_iterations: 1,
            ..cfg.clone()
        };
        let mut x = prior.mean;
        for _ in 0..cfg.max_iterations {
            x = update_from(prior, x, &measurement(&mut rng), &single)?.belief.mean;
        }
        let last = FilterConfig {
            max_iterations: 0,
            ..cfg.clone()
        };
        let mut o = update_from(prior, x, &measurement(&mut rng), &last)?;
        o.iterations = cfg.max_iterations;
        o
    } else {
        update(prior, &measurement(&mut rng), cfg)?
    };
    Ok(FilterRecord {
        format_version: TRACE_FORMAT_VERSION,
        t,
        prior: *prior,
        posterior: outcome.belief,
        truth: None,
        measurement_loss: outcome.measurement_loss,
        process_loss: outcome.process_loss,
        pixel_seed,
        iterations: outcome.iterations,
        low_information: outcome.low_information,
    })
}

/// Write filter records as JSON lines.
pub fn write_trace<W: Write>(records: &[FilterRecord], mut out: W) -> Result<(), EstimatorError> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(text: &str) -> Result<Vec<FilterRecord>, EstimatorError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Translation, rotation and velocity errors of an estimate.
pub fn state_errors(estimate: &FullState, truth: &FullState) -> (f64, f64, f64) {
    (
        (estimate.position() - truth.position()).norm(),
        rotation_angle(&(estimate.rotation() * truth.rotation().transpose())),
        (estimate.velocity - truth.velocity).norm(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelKind;
    use crate::field::{Aabb, AnalyticScene, Primitive};
    use crate::geom::so3_exp;
    use crate::render::render_image;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn spd(rng: &mut ChaCha8Rng, scale: f64) -> StateMatrix {
        let a = StateMatrix::from_fn(|_, _| gauss(rng));
        a * a.transpose() * (scale / 12.0) + StateMatrix::identity() * scale * 0.1
    }

    fn planar_state(yaw: f64) -> FullState {
        FullState {
            pose: Pose::from_yaw(yaw, Vector3::new(0.3, -0.2, 0.0)),
            velocity: Vector3::new(0.1, 0.05, 0.0),
            angular_velocity: Vector3::new(0.0, 0.0, 0.2),
        }
    }

    #[test]
    fn planar_predict_matches_linear_kalman() {
        let robot = Robot::planar([0.1, 0.05, 0.05]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Belief::new(planar_state(0.4), spd(&mut rng, 0.1));
        let u = Control::Planar {
            force: [0.3, -0.2],
            torque: 0.01,
        };
        let out = propagate(&b, &u, &robot, &StateMatrix::zeros());
        let dt = robot.dt;
        // (x, y, θ, vx, vy, ω) double integrators
        let idx = [3, 4, 2, 6, 7, 11];
        let mut f = nalgebra::SMatrix::<f64, 6, 6>::identity();
        f[(0, 3)] = dt;
        f[(1, 4)] = dt;
        f[(2, 5)] = dt;
        let sub = nalgebra::SMatrix::<f64, 6, 6>::from_fn(|i, j| b.cov[(idx[i], idx[j])]);
        let expect = f * sub * f.transpose();
        for i in 0..6 {
            for j in 0..6 {
                assert!((out.cov[(idx[i], idx[j])] - expect[(i, j)]).abs() < 1e-10);
            }
        }
        let a = Vector3::new(0.3, -0.2, 0.0) / robot.mass;
        let v = b.mean.velocity + a * dt;
        assert_relative_eq!(out.mean.velocity, v, epsilon = 1e-12);
        assert_relative_eq!(out.mean.position(), b.mean.position() + v * dt, epsilon = 1e-12);
        assert_relative_eq!(out.mean.yaw(), 0.4 + dt * (0.2 + dt * 0.01 / robot.inertia[2]), epsilon = 1e-12);
        assert_eq!(robot.model, ModelKind::Planar);
    }

    #[test]
    fn hover_predict_adds_q() {
        let robot = Robot::quadrotor();
        let b = Belief::isotropic(FullState::at_rest(Pose::identity()), 0.1);
        let q = StateMatrix::identity() * 0.1;
        let out = propagate(&b, &Control::hover(&robot), &robot, &q);
        assert_eq!(out.mean.position(), Vector3::zeros());
        let a = dynamics_jacobian(&b.mean, &Control::hover(&robot), &robot);
        assert!((out.cov - (a * b.cov * a.transpose() + q)).abs().max() < 1e-14);
        assert!(out.cov[(3, 3)] > 0.2);
    }

    fn linear_problem(seed: u64, m: usize) -> (Belief, LinearMeasurement) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = Belief::new(planar_state(0.3), spd(&mut rng, 0.05));
        let h = DMatrix::from_fn(m, 12, |_, _| gauss(&mut rng));
        let origin = prior.mean;
        let offset = DVector::from_fn(m, |_, _| gauss(&mut rng));
        let observed = DVector::from_fn(m, |_, _| gauss(&mut rng) * 0.1);
        (
            prior,
            LinearMeasurement {
                h,
                origin,
                offset,
                observed,
            },
        )
    }

    fn linear_cfg(s: f64) -> FilterConfig {
        FilterConfig {
            measurement_noise: s,
            outlier_quantile: 1.0,
            max_iterations: 100,
            step_tolerance: 1e-13,
            ..FilterConfig::default()
        }
    }

    #[test]
    fn linear_double_equals_kalman_update() {
        let (prior, meas) = linear_problem(11, 8);
        let s = 0.5;
        let out = update(&prior, &meas, &linear_cfg(s)).unwrap();
        // Reference KF in the chart at the prior mean.
        let h = &meas.h;
        let e0 = state_difference(&prior.mean, &meas.origin);
        let innovation = &meas.observed - (h * DVector::from_column_slice(e0.as_slice()) + &meas.offset);
        let p = DMatrix::from_column_slice(12, 12, prior.cov.as_slice());
        let s_mat = h * &p * h.transpose() + DMatrix::identity(8, 8) * s;
        let k = &p * h.transpose() * s_mat.try_inverse().unwrap();
        let dx = &k * innovation;
        let cov = (DMatrix::identity(12, 12) - &k * h) * &p;
        let got = state_difference(&out.belief.mean, &prior.mean);
        for i in 0..12 {
            assert!((got[i] - dx[i]).abs() < 1e-6, "mean {i}: {} vs {}", got[i], dx[i]);
            for j in 0..12 {
                assert!((out.belief.cov[(i, j)] - cov[(i, j)]).abs() < 1e-6);
            }
        }
        let info = h.transpose() * h / s + DMatrix::from_column_slice(12, 12, prior.cov.try_inverse().unwrap().as_slice());
        let inv = info.try_inverse().unwrap();
        assert!((DMatrix::from_column_slice(12, 12, out.belief.cov.as_slice()) - inv).abs().max() < 1e-9);
    }

    #[test]
    fn infinite_measurement_noise_passes_prior_through() {
        let (prior, meas) = linear_problem(5, 6);
        let out = update(&prior, &meas, &linear_cfg(f64::INFINITY)).unwrap();
        assert_eq!(out.belief, prior);
    }

    #[test]
    fn tight_prior_dominates() {
        let (mut prior, meas) = linear_problem(6, 6);
        prior.cov = StateMatrix::identity() * 1e-12;
        let out = update(&prior, &meas, &linear_cfg(1.0)).unwrap();
        assert!(state_difference(&out.belief.mean, &prior.mean).norm() < 1e-4);
    }

    #[test]
    fn zero_process_weight_is_baseline() {
        let (prior, meas) = linear_problem(8, 10);
        let cfg = FilterConfig {
            process_weight: 0.0,
            ..linear_cfg(1.0)
        };
        let a = update(&prior, &meas, &cfg).unwrap();
        let b = run_inerf_baseline(&prior, &meas, &linear_cfg(1.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.belief.mean.velocity, prior.mean.velocity);
    }

    #[test]
    fn retraction_differs_from_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // A measurement of the rotation matrix entries, nonlinear in the chart.
        struct RotEntries {
            z: DVector<f64>,
        }
        impl Measurement for RotEntries {
            fn observed(&self) -> &DVector<f64> {
                &self.z
            }
            fn predict(&self, x: &FullState) -> Result<(DVector<f64>, DMatrix<f64>), EstimatorError> {
                let r = x.rotation();
                let v = DVector::from_iterator(9, r.iter().copied());
                let mut j = DMatrix::zeros(9, 12);
                for a in 0..3 {
                    let mut e = Vector3::zeros();
                    e[a] = 1.0;
                    let d = hat(&e) * r;
                    for (k, val) in d.iter().enumerate() {
                        j[(k, a)] = *val;
                    }
                }
                Ok((v, j))
            }
        }
        let truth = so3_exp(&Vector3::new(0.8, -0.5, 0.6));
        let meas = RotEntries {
            z: DVector::from_iterator(9, truth.iter().copied()),
        };
        let mut cov = StateMatrix::identity() * (1.0 + gauss(&mut rng).abs());
        cov[(0, 0)] = 10.0;
        cov[(1, 1)] = 0.05;
        let prior = Belief::new(FullState::at_rest(Pose::identity()), cov);
        let mk = |acc| FilterConfig {
            max_iterations: 2,
            outlier_quantile: 1.0,
            accumulate_tangent: acc,
            ..FilterConfig::default()
        };
        let a = update(&prior, &meas, &mk(false)).unwrap().belief.mean;
        let b = update(&prior, &meas, &mk(true)).unwrap().belief.mean;
        assert!((a.rotation() - b.rotation()).norm() > 1e-6);
    }

    #[test]
    fn uniform_image_selects_uniformly() {
        let img = RenderedImage::filled(20, 20, Vector3::repeat(0.3));
        let scores = interest_scores(&img, &DetectorConfig::default());
        assert!(scores.iter().all(|&s| s == DetectorConfig::default().floor));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = select_pixels(&img, 400, &DetectorConfig::default(), &mut rng);
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        let mut counts = [0usize; 4];
        for s in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            for i in select_pixels(&img, 40, &DetectorConfig::default(), &mut rng) {
                counts[(i / 20 >= 10) as usize * 2 + (i % 20 >= 10) as usize] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 - 2000.0).abs() < 200.0, "{counts:?}");
        }
    }

    #[test]
    fn edge_attracts_samples() {
        let mut img = RenderedImage::filled(100, 100, Vector3::repeat(0.1));
        for r in 0..100 {
            for c in 50..100 {
                img.pixels[r * 100 + c] = Vector3::repeat(0.9);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let px = select_pixels(&img, 256, &DetectorConfig::default(), &mut rng);
        let near = px.iter().filter(|&&i| ((i % 100) as f64 - 49.5).abs() <= 3.5).count();
        assert!(near as f64 >= 0.7 * 256.0, "{near}");
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(px, select_pixels(&img, 256, &DetectorConfig::default(), &mut rng2));
    }

    fn textured_scene() -> AnalyticScene {
        let mut s = AnalyticScene::empty(Aabb::new(Vector3::new(-3.0, -3.0, -1.0), Vector3::new(3.0, 3.0, 3.0)));
        let colors = [[0.9, 0.2, 0.1], [0.1, 0.8, 0.3], [0.2, 0.3, 0.9], [0.9, 0.9, 0.2]];
        for (k, col) in colors.iter().enumerate() {
            let a = k as f64 * 0.7 - 1.0;
            s = s.with_primitive(
                Primitive::sphere(Vector3::new(2.0, a, 0.8 + 0.2 * k as f64), 0.35, 40.0, *col)
                    .with_softness(0.02)
                    .with_texture(0.6, 9.0),
            );
        }
        s
    }

    fn small_cfg() -> FilterConfig {
        FilterConfig {
            camera: Camera::square(40, 40.0),
            render: RenderOptions {
                n_samples: 48,
                ..RenderOptions::default()
            },
            pixel_budget: 128,
            ..FilterConfig::default()
        }
    }

    #[test]
    fn photometric_jacobian_matches_finite_differences() {
        let scene = textured_scene();
        let cfg = small_cfg();
        let x = FullState::at_rest(Pose::new(so3_exp(&Vector3::new(0.02, -0.03, 0.1)), Vector3::new(0.1, 0.0, 1.0)));
        let img = render_image(&scene, &cfg.camera, &(x.pose * cfg.camera_mount), &cfg.render, None, ExecPolicy::Sequential).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let px = select_pixels(&img, 40, &cfg.detector, &mut rng);
        let meas = PhotometricMeasurement::new(&scene, cfg.camera, cfg.camera_mount, cfg.render, &img, px, ExecPolicy::Sequential);
        let (v0, j) = meas.predict(&x).unwrap();
        assert!((&v0 - meas.observed()).norm() < 1e-12);
        let eps = 1e-6;
        for k in 0..6 {
            let mut d = StateVector::zeros();
            d[k] = eps;
            let plus = meas.predict_value(&state_retract(&x, &d)).unwrap();
            d[k] = -eps;
            let minus = meas.predict_value(&state_retract(&x, &d)).unwrap();
            let fd = (plus - minus) / (2.0 * eps);
            let col = j.column(k);
            assert!((&fd - &col).norm() <= 1e-2 * fd.norm().max(1e-3), "column {k}");
        }
    }

    #[test]
    fn update_reduces_pose_error() {
        let scene = textured_scene();
        let cfg = small_cfg();
        let truth = FullState::at_rest(Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)));
        let img = render_image(&scene, &cfg.camera, &(truth.pose * cfg.camera_mount), &cfg.render, None, ExecPolicy::Sequential).unwrap();
        let pred = FullState::at_rest(Pose::new(so3_exp(&Vector3::new(0.0, 0.0, 0.02)), Vector3::new(0.03, 0.0, 1.0)));
        let prior = Belief::isotropic(pred, 0.1);
        let rec = correct(&prior, &img, &scene, &cfg, 17, 1).unwrap();
        let (e_post, _, _) = state_errors(&rec.posterior.mean, &truth);
        let (e_prior, _, _) = state_errors(&pred, &truth);
        assert!(e_post < e_prior, "{e_post} vs {e_prior}");
        assert!(rec.posterior.is_valid());
    }

    #[test]
    fn trace_round_trips() {
        let b = Belief::isotropic(FullState::at_rest(Pose::identity()), 0.1);
        let r = FilterRecord {
            format_version: TRACE_FORMAT_VERSION,
            t: 3,
            prior: b,
            posterior: b,
            truth: Some(b.mean),
            measurement_loss: 1.5,
            process_loss: 0.25,
            pixel_seed: 99,
            iterations: 4,
            low_information: false,
        };
        let mut buf = Vec::new();
        write_trace(&[r.clone(), r.clone()], &mut buf).unwrap();
        let back = read_trace(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, vec![r.clone(), r]);
    }
}

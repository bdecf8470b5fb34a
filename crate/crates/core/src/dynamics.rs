//! Discrete differential flatness and the rigid-body simulator it inverts.
//!
//! The simulator is semi-implicit Euler:
//!
//! ```text
//! v⁺ = v + Δt·a(R, u)          p⁺ = p + Δt·v⁺
//! ω⁺ = ω + Δt·I⁻¹(M − ω×Iω)    R⁺ = R·exp(Δt·ω⁺)
//! ```
//!
//! The flatness map is its exact inverse. The state velocity at step τ is the
//! difference arriving at τ, `v_τ = (σ_τ − σ_{τ−1})/Δt`, the acceleration is the
//! central second difference, and angular velocity is `log(R_{τ−1}ᵀR_τ)/Δt`.
//! Virtual waypoints `σ_{−1} = σ₀ − v₀Δt` and `σ_{h+1} = σ_h + v_fΔt` pin the
//! boundary velocities. All of this is written over [`Real`] so the planner
//! can differentiate it with dual numbers.

use crate::autodiff::v3::{self, M3, V3};
use crate::autodiff::Real;
use crate::geom::{hat, so3_exp, so3_log, so3_right_jacobian, wrap_angle, Pose};
use nalgebra::{Matrix3, SMatrix, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const ROBOT_FORMAT_VERSION: u32 = 1;

/// Below this `‖a + g e_z‖` the thrust direction is undefined.
pub const FREE_FALL_EPS: f64 = 1e-6;

pub type StateMatrix = SMatrix<f64, 12, 12>;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("free fall at step {step}: commanded specific force vanishes")]
    FreeFallSingularity { step: usize },
    #[error("horizon {0} is shorter than 4 steps")]
    HorizonTooShort(usize),
    #[error("invalid robot description: {0}")]
    InvalidRobot(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("robot json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadrotor,
    /// Omnidirectional ground robot moving in the plane `z = const`.
    Planar,
}

/// Standard deviations of the additive process noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// m
    pub position: f64,
    /// rad, applied as `R·exp(n)`
    pub rotation: f64,
    /// m/s
    pub velocity: f64,
    /// rad/s
    pub angular_velocity: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            position: 0.02,
            rotation: 0.02,
            velocity: 0.01,
            angular_velocity: 0.01,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            rotation: 0.0,
            velocity: 0.0,
            angular_velocity: 0.0,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            position: self.position * s,
            rotation: self.rotation * s,
            velocity: self.velocity * s,
            angular_velocity: self.angular_velocity * s,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.position == 0.0 && self.rotation == 0.0 && self.velocity == 0.0 && self.angular_velocity == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    /// Half side lengths of the bounding box (m).
    pub half_extents: [f64; 3],
    /// Grid points per axis.
    pub resolution: [usize; 3],
}

impl Default for BodySpec {
    fn default() -> Self {
        Self {
            half_extents: [0.05; 3],
            resolution: [5, 5, 3],
        }
    }
}

/// Body-frame points at which collision is checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    pub points: Vec<Vector3<f64>>,
    /// Cell volume per point (m³).
    pub weights: Vec<f64>,
}

impl BodyModel {
    /// Regular grid spanning the box, corners included.
    pub fn grid(spec: &BodySpec) -> Self {
        let axis = |i: usize| -> Vec<f64> {
            let n = spec.resolution[i].max(1);
            let h = spec.half_extents[i];
            if n == 1 {
                vec![0.0]
            } else {
                (0..n).map(|k| -h + 2.0 * h * k as f64 / (n - 1) as f64).collect()
            }
        };
        let (xs, ys, zs) = (axis(0), axis(1), axis(2));
        let mut points = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &x in &xs {
            for &y in &ys {
                for &z in &zs {
                    points.push(Vector3::new(x, y, z));
                }
            }
        }
        let volume = 8.0 * spec.half_extents.iter().product::<f64>();
        let w = volume / points.len() as f64;
        let weights = vec![w; points.len()];
        Self { points, weights }
    }

    pub fn single_point() -> Self {
        Self {
            points: vec![Vector3::zeros()],
            weights: vec![0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest distance of a body point from the body origin.
    pub fn radius(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }
}

/// Physical description of the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robot {
    pub model: ModelKind,
    /// kg
    pub mass: f64,
    /// Principal moments of inertia (kg·m²).
    pub inertia: [f64; 3],
    /// m/s²
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    /// s
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub body: BodySpec,
    #[serde(default)]
    pub noise: NoiseSpec,
}

fn default_gravity() -> f64 {
    9.81
}

fn default_dt() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub robot: Robot,
}

impl Default for Robot {
    fn default() -> Self {
        Self::quadrotor()
    }
}

impl Robot {
    pub fn quadrotor() -> Self {
        Self {
            model: ModelKind::Quadrotor,
            mass: 1.0,
            inertia: [0.01; 3],
            gravity: default_gravity(),
            dt: default_dt(),
            body: BodySpec::default(),
            noise: NoiseSpec::default(),
        }
    }

    /// Ground robot with the given footprint half extents (x, y) and height.
    pub fn planar(half_extents: [f64; 3]) -> Self {
        Self {
            model: ModelKind::Planar,
            body: BodySpec {
                half_extents,
                resolution: [9, 5, 3],
            },
            ..Self::quadrotor()
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia))
    }

    pub fn body_model(&self) -> BodyModel {
        BodyModel::grid(&self.body)
    }

    pub fn hover_thrust(&self) -> f64 {
        match self.model {
            ModelKind::Quadrotor => self.mass * self.gravity,
            ModelKind::Planar => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = self.mass > 0.0
            && self.inertia.iter().all(|&i| i > 0.0)
            && self.dt > 0.0
            && self.gravity >= 0.0
            && self.body.half_extents.iter().all(|&h| h >= 0.0)
            && self.body.resolution.iter().all(|&n| n >= 1);
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidRobot(format!("{self:?}")))
        }
    }

    pub fn from_json(s: &str) -> Result<Self, DynamicsError> {
        let f: RobotFile = serde_json::from_str(s)?;
        if f.format_version != ROBOT_FORMAT_VERSION {
            return Err(DynamicsError::InvalidRobot(format!(
                "unsupported format_version {}",
                f.format_version
            )));
        }
        f.robot.validate()?;
        Ok(f.robot)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RobotFile {
            format_version: ROBOT_FORMAT_VERSION,
            robot: self.clone(),
        })
        .expect("robot serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DynamicsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Full rigid-body state. Angular velocity is in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl FullState {
    pub fn at_rest(pose: Pose) -> Self {
        Self {
            pose,
            velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.translation
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.rotation
    }

    /// Heading of the body x-axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        let r = &self.pose.rotation;
        r[(1, 0)].atan2(r[(0, 0)])
    }

    pub fn is_finite(&self) -> bool {
        self.pose.rotation.iter().all(|v| v.is_finite())
            && self.pose.translation.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.angular_velocity.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Control {
    /// Collective thrust along body z (N) and body torques (N·m).
    Quadrotor { thrust: f64, torque: Vector3<f64> },
    /// World-frame planar force (N) and yaw torque (N·m).
    Planar { force: [f64; 2], torque: f64 },
}

impl Control {
    pub fn hover(robot: &Robot) -> Self {
        Self::from_vector(robot.model, &Vector4::new(robot.hover_thrust(), 0.0, 0.0, 0.0))
    }

    /// Quadrotor `(thrust, τx, τy, τz)`; planar `(fx, fy, 0, τz)`.
    pub fn as_vector(&self) -> Vector4<f64> {
        match *self {
            Control::Quadrotor { thrust, torque } => Vector4::new(thrust, torque.x, torque.y, torque.z),
            Control::Planar { force, torque } => Vector4::new(force[0], force[1], 0.0, torque),
        }
    }

    pub fn from_vector(model: ModelKind, u: &Vector4<f64>) -> Self {
        match model {
            ModelKind::Quadrotor => Control::Quadrotor {
                thrust: u[0],
                torque: Vector3::new(u[1], u[2], u[3]),
            },
            ModelKind::Planar => Control::Planar {
                force: [u[0], u[1]],
                torque: u[3],
            },
        }
    }

    fn torque(&self) -> Vector3<f64> {
        match *self {
            Control::Quadrotor { torque, .. } => torque,
            Control::Planar { torque, .. } => Vector3::new(0.0, 0.0, torque),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatWaypoint {
    pub position: Vector3<f64>,
    pub yaw: f64,
}

impl FlatWaypoint {
    pub fn new(position: Vector3<f64>, yaw: f64) -> Self {
        Self { position, yaw }
    }
}

mod rowmajor_opt {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Matrix3<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => {
                let v: Vec<f64> = (0..9).map(|i| m[(i / 3, i % 3)]).collect();
                s.serialize_some(&v)
            }
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix3<f64>>, D::Error> {
        let v: Option<[f64; 9]> = Option::deserialize(d)?;
        Ok(v.map(|v| Matrix3::from_row_slice(&v)))
    }
}

/// Flat-output waypoints `σ₀…σ_h` with pinned boundary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatTrajectory {
    pub waypoints: Vec<FlatWaypoint>,
    pub dt: f64,
    pub start_velocity: Vector3<f64>,
    pub end_velocity: Vector3<f64>,
    pub start_angular_velocity: Vector3<f64>,
    /// When set, `R₀` is this rotation instead of the flatness rotation.
    #[serde(default, with = "rowmajor_opt", skip_serializing_if = "Option::is_none")]
    pub start_rotation: Option<Matrix3<f64>>,
}

impl FlatTrajectory {
    pub fn new(waypoints: Vec<FlatWaypoint>, dt: f64) -> Self {
        Self {
            waypoints,
            dt,
            start_velocity: Vector3::zeros(),
            end_velocity: Vector3::zeros(),
            start_angular_velocity: Vector3::zeros(),
            start_rotation: None,
        }
    }

    /// Straight constant-yaw line with `h + 1` evenly spaced waypoints.
    pub fn straight_line(start: Vector3<f64>, goal: Vector3<f64>, yaw: f64, h: usize, dt: f64) -> Self {
        let wps = (0..=h)
            .map(|k| FlatWaypoint::new(start + (goal - start) * (k as f64 / h as f64), yaw))
            .collect();
        Self::new(wps, dt)
    }

    /// Pin the start to a full state.
    pub fn pinned_to(mut self, state: &FullState) -> Self {
        self.waypoints[0].position = state.position();
        self.start_velocity = state.velocity;
        self.start_angular_velocity = state.angular_velocity;
        self.start_rotation = Some(state.rotation());
        self
    }

    pub fn horizon(&self) -> usize {
        self.waypoints.len().saturating_sub(1)
    }

    /// Move `σ₁` onto the set reachable in one step from the pinned start.
    ///
    /// A quadrotor cannot change attitude before its first control acts, so
    /// the step-0 acceleration must lie along the pinned thrust axis with
    /// non-negative thrust. Other robots and unpinned trajectories are
    /// returned unchanged.
    pub fn with_feasible_first_step(mut self, robot: &Robot) -> Self {
        let (Some(r0), ModelKind::Quadrotor) = (self.start_rotation, robot.model) else {
            return self;
        };
        if self.waypoints.len() < 3 {
            return self;
        }
        let dt2 = self.dt * self.dt;
        let z = r0.column(2).into_owned();
        let base = self.waypoints[0].position + self.start_velocity * self.dt - Vector3::z() * (robot.gravity * dt2);
        let min_lift = 1e-3 * robot.gravity * dt2;
        let s = (self.waypoints[1].position - base).dot(&z).max(min_lift);
        self.waypoints[1].position = base + z * s;
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.horizon() < 4 {
            return Err(DynamicsError::HorizonTooShort(self.horizon()));
        }
        Ok(())
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.waypoints.iter().map(|w| w.position).collect()
    }

    /// Flat outputs over `[first, first + len)` (indices may include the
    /// virtual points −1 and h+1), as constants.
    pub fn window<T: Real>(&self, first: isize, len: usize) -> FlatWindow<T> {
        let h = self.horizon() as isize;
        let mut pos = Vec::with_capacity(len);
        let mut yaw = Vec::with_capacity(len);
        for j in first..first + len as isize {
            let p = self.position_at(j);
            pos.push(v3::cst([p.x, p.y, p.z]));
            yaw.push(T::cst(self.waypoints[j.clamp(0, h) as usize].yaw));
        }
        FlatWindow { first, pos, yaw }
    }

    fn position_at(&self, j: isize) -> Vector3<f64> {
        let h = self.horizon() as isize;
        if j < 0 {
            self.waypoints[0].position - self.start_velocity * self.dt
        } else if j > h {
            self.waypoints[h as usize].position + self.end_velocity * self.dt
        } else {
            self.waypoints[j as usize].position
        }
    }
}

/// A contiguous slice of flat outputs used by the generic flatness map.
#[derive(Debug, Clone)]
pub struct FlatWindow<T> {
    pub first: isize,
    pub pos: Vec<V3<T>>,
    pub yaw: Vec<T>,
}

impl<T: Real> FlatWindow<T> {
    fn p(&self, j: isize) -> &V3<T> {
        &self.pos[(j - self.first) as usize]
    }

    fn psi(&self, j: isize) -> T {
        self.yaw[(j - self.first) as usize]
    }
}

/// The flatness map for one trajectory's boundary data.
#[derive(Debug, Clone, Copy)]
pub struct FlatMap<'a> {
    pub robot: &'a Robot,
    pub dt: f64,
    pub horizon: usize,
    pub start_rotation: Option<Matrix3<f64>>,
    pub start_angular_velocity: Vector3<f64>,
}

impl<'a> FlatMap<'a> {
    pub fn new(traj: &FlatTrajectory, robot: &'a Robot) -> Self {
        Self {
            robot,
            dt: traj.dt,
            horizon: traj.horizon(),
            start_rotation: traj.start_rotation,
            start_angular_velocity: traj.start_angular_velocity,
        }
    }

    fn accel<T: Real>(&self, w: &FlatWindow<T>, j: isize) -> V3<T> {
        let second = v3::add(&v3::sub(w.p(j + 1), &v3::scale_f(w.p(j), 2.0)), w.p(j - 1));
        v3::scale_f(&second, 1.0 / (self.dt * self.dt))
    }

    /// `a_j + g e_z`, the specific force the thrust must supply.
    fn specific_force<T: Real>(&self, w: &FlatWindow<T>, j: isize) -> Result<V3<T>, DynamicsError> {
        let mut n = self.accel(w, j);
        n[2] = n[2] + self.robot.gravity;
        if v3::norm(&n).value() < FREE_FALL_EPS {
            return Err(DynamicsError::FreeFallSingularity { step: j.max(0) as usize });
        }
        Ok(n)
    }

    /// Rotation `R_j`, `0 ≤ j ≤ h`.
    pub fn rotation<T: Real>(&self, w: &FlatWindow<T>, j: isize) -> Result<M3<T>, DynamicsError> {
        if j == 0 {
            if let Some(r) = &self.start_rotation {
                return Ok(v3::mat_cst(r));
            }
        }
        let psi = w.psi(j);
        let (s, c) = (psi.sin(), psi.cos());
        match self.robot.model {
            ModelKind::Planar => {
                let z = T::cst(0.0);
                let o = T::cst(1.0);
                Ok([[c, -s, z], [s, c, z], [z, z, o]])
            }
            ModelKind::Quadrotor => {
                let n = self.specific_force(w, j)?;
                let zb = v3::normalize(&n);
                let xc = [c, s, T::cst(0.0)];
                let yb = v3::normalize(&v3::cross(&zb, &xc));
                let xb = v3::cross(&yb, &zb);
                Ok(v3::from_columns(&xb, &yb, &zb))
            }
        }
    }

    /// Body angular velocity `ω_j`; `ω₀` is pinned.
    pub fn angular_velocity<T: Real>(&self, w: &FlatWindow<T>, j: isize) -> Result<V3<T>, DynamicsError> {
        if j <= 0 {
            let o = self.start_angular_velocity;
            return Ok(v3::cst([o.x, o.y, o.z]));
        }
        let j = j.min(self.horizon as isize);
        let prev = self.rotation(w, j - 1)?;
        let cur = self.rotation(w, j)?;
        let rel = v3::mat_mul(&v3::transpose(&prev), &cur);
        Ok(v3::scale_f(&v3::so3_log(&rel), 1.0 / self.dt))
    }

    pub fn velocity<T: Real>(&self, w: &FlatWindow<T>, j: isize) -> V3<T> {
        v3::scale_f(&v3::sub(w.p(j), w.p(j - 1)), 1.0 / self.dt)
    }

    /// Control `u_j` as a 4-vector: quadrotor `(thrust, M)`, planar
    /// `(fx, fy, 0, τz)`. The torque at `j = h` holds `ω` constant.
    pub fn control<T: Real>(&self, w: &FlatWindow<T>, j: isize) -> Result<[T; 4], DynamicsError> {
        let inertia = Vector3::from(self.robot.inertia);
        let omega = self.angular_velocity(w, j)?;
        let omega_next = if (j as usize) < self.horizon {
            self.angular_velocity(w, j + 1)?
        } else {
            omega
        };
        let i_omega = [omega[0] * inertia.x, omega[1] * inertia.y, omega[2] * inertia.z];
        let gyro = v3::cross(&omega, &i_omega);
        let domega = v3::scale_f(&v3::sub(&omega_next, &omega), 1.0 / self.dt);
        let torque = [
            domega[0] * inertia.x + gyro[0],
            domega[1] * inertia.y + gyro[1],
            domega[2] * inertia.z + gyro[2],
        ];
        let m = self.robot.mass;
        match self.robot.model {
            ModelKind::Quadrotor => {
                let n = self.specific_force(w, j)?;
                let thrust = match (&self.start_rotation, j) {
                    (Some(r0), 0) => {
                        let z = r0.column(2);
                        (n[0] * z[0] + n[1] * z[1] + n[2] * z[2]) * m
                    }
                    _ => v3::norm(&n) * m,
                };
                Ok([thrust, torque[0], torque[1], torque[2]])
            }
            ModelKind::Planar => {
                let a = self.accel(w, j);
                Ok([a[0] * m, a[1] * m, T::cst(0.0), torque[2]])
            }
        }
    }
}

/// States and controls `(x_τ, u_τ)` for `τ = 0…h`.
pub fn derive_states(traj: &FlatTrajectory, robot: &Robot) -> Result<Vec<(FullState, Control)>, DynamicsError> {
    traj.validate()?;
    let h = traj.horizon();
    let map = FlatMap::new(traj, robot);
    let w = traj.window::<f64>(-1, h + 3);
    (0..=h as isize)
        .map(|j| {
            let r = v3::mat_values(&map.rotation(&w, j)?);
            let v = map.velocity(&w, j);
            let o = map.angular_velocity(&w, j)?;
            let u = map.control(&w, j)?;
            let state = FullState {
                pose: Pose::new(r, traj.waypoints[j as usize].position),
                velocity: Vector3::from(v),
                angular_velocity: Vector3::from(o),
            };
            Ok((state, Control::from_vector(robot.model, &Vector4::from(u))))
        })
        .collect()
}

/// [`derive_states`] for the planar model regardless of `robot.model`.
pub fn derive_states_planar(traj: &FlatTrajectory, robot: &Robot) -> Result<Vec<(FullState, Control)>, DynamicsError> {
    let planar = Robot {
        model: ModelKind::Planar,
        ..robot.clone()
    };
    derive_states(traj, &planar)
}

/// Distance travelled by each body point between two states.
pub fn swept_distance(a: &FullState, b: &FullState, body: &BodyModel) -> Vec<f64> {
    body.points
        .iter()
        .map(|p| (b.pose.transform_point(p) - a.pose.transform_point(p)).norm())
        .collect()
}

fn linear_acceleration(x: &FullState, u: &Control, robot: &Robot) -> Vector3<f64> {
    match *u {
        Control::Quadrotor { thrust, .. } => {
            x.pose.rotation.column(2) * (thrust / robot.mass) - Vector3::z() * robot.gravity
        }
        Control::Planar { force, .. } => Vector3::new(force[0], force[1], 0.0) / robot.mass,
    }
}

/// One noise-free step.
pub fn step(x: &FullState, u: &Control, robot: &Robot) -> FullState {
    let dt = robot.dt;
    let inertia = robot.inertia_matrix();
    let w = x.angular_velocity;
    let v = x.velocity + linear_acceleration(x, u, robot) * dt;
    let p = x.pose.translation + v * dt;
    let w_dot = inertia.try_inverse().expect("positive inertia") * (u.torque() - w.cross(&(inertia * w)));
    let w_next = w + w_dot * dt;
    let r = x.pose.rotation * so3_exp(&(w_next * dt));
    FullState {
        pose: Pose::new(r, p),
        velocity: v,
        angular_velocity: w_next,
    }
}

/// Additive zero-mean Gaussian noise; planar robots are only perturbed in-plane.
pub fn apply_noise<R: Rng + ?Sized>(x: &FullState, noise: &NoiseSpec, model: ModelKind, rng: &mut R) -> FullState {
    let mut draw = |s: f64| -> Vector3<f64> {
        if s <= 0.0 {
            return Vector3::zeros();
        }
        let n = Normal::new(0.0, s).expect("finite std");
        Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
    };
    let (mut dp, mut dr, mut dv, mut dw) = (
        draw(noise.position),
        draw(noise.rotation),
        draw(noise.velocity),
        draw(noise.angular_velocity),
    );
    if model == ModelKind::Planar {
        dp.z = 0.0;
        dv.z = 0.0;
        dr.x = 0.0;
        dr.y = 0.0;
        dw.x = 0.0;
        dw.y = 0.0;
    }
    FullState {
        pose: Pose::new(x.pose.rotation * so3_exp(&dr), x.pose.translation + dp),
        velocity: x.velocity + dv,
        angular_velocity: x.angular_velocity + dw,
    }
}

/// One step followed by process noise drawn from `rng`.
pub fn simulate_step<R: Rng + ?Sized>(
    x: &FullState,
    u: &Control,
    robot: &Robot,
    noise: &NoiseSpec,
    rng: &mut R,
) -> FullState {
    let next = step(x, u, robot);
    if noise.is_zero() {
        return next;
    }
    apply_noise(&next, noise, robot.model, rng)
}

/// Jacobian of [`step`] in tangent coordinates `(δθ, δp, δv, δω)` with the
/// rotation perturbed on the left, `R ↦ exp(δθ)·R`.
pub fn dynamics_jacobian(x: &FullState, u: &Control, robot: &Robot) -> StateMatrix {
    let dt = robot.dt;
    let inertia = robot.inertia_matrix();
    let inertia_inv = inertia.try_inverse().expect("positive inertia");
    let w = x.angular_velocity;
    let next = step(x, u, robot);
    let mut a = StateMatrix::identity();
    // ∂v⁺/∂δθ: only the thrust direction depends on attitude
    let dv_dtheta = match *u {
        Control::Quadrotor { thrust, .. } => -hat(&x.pose.rotation.column(2).into_owned()) * (thrust / robot.mass * dt),
        Control::Planar { .. } => Matrix3::zeros(),
    };
    let dw_dw = Matrix3::identity() - inertia_inv * (hat(&w) * inertia - hat(&(inertia * w))) * dt;
    let dtheta_dw = next.pose.rotation * so3_right_jacobian(&(next.angular_velocity * dt)) * dt * dw_dw;
    a.fixed_view_mut::<3, 3>(0, 9).copy_from(&dtheta_dw);
    a.fixed_view_mut::<3, 3>(6, 0).copy_from(&dv_dtheta);
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dv_dtheta * dt));
    a.fixed_view_mut::<3, 3>(3, 6).copy_from(&(Matrix3::identity() * dt));
    a.fixed_view_mut::<3, 3>(9, 9).copy_from(&dw_dw);
    a
}

/// Tangent-space difference `a ⊖ b` in `(δθ, δp, δv, δω)`, with
/// `exp(δθ)·R_b = R_a`.
pub fn state_difference(a: &FullState, b: &FullState) -> nalgebra::SVector<f64, 12> {
    let mut e = nalgebra::SVector::<f64, 12>::zeros();
    let dr = so3_log(&(a.pose.rotation * b.pose.rotation.transpose()));
    e.fixed_rows_mut::<3>(0).copy_from(&dr);
    e.fixed_rows_mut::<3>(3).copy_from(&(a.pose.translation - b.pose.translation));
    e.fixed_rows_mut::<3>(6).copy_from(&(a.velocity - b.velocity));
    e.fixed_rows_mut::<3>(9).copy_from(&(a.angular_velocity - b.angular_velocity));
    e
}

/// `exp(δθ)·R`, `p + δp`, `v + δv`, `ω + δω`.
pub fn state_retract(x: &FullState, delta: &nalgebra::SVector<f64, 12>) -> FullState {
    let dtheta = delta.fixed_rows::<3>(0).into_owned();
    FullState {
        pose: Pose::new(so3_exp(&dtheta) * x.pose.rotation, x.pose.translation + delta.fixed_rows::<3>(3)),
        velocity: x.velocity + delta.fixed_rows::<3>(6),
        angular_velocity: x.angular_velocity + delta.fixed_rows::<3>(9),
    }
}

/// Yaw sequence unwrapped so that consecutive values differ by less than π.
pub fn unwrap_yaw(yaw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(yaw.len());
    for (i, &y) in yaw.iter().enumerate() {
        if i == 0 {
            out.push(y);
        } else {
            let prev: f64 = out[i - 1];
            out.push(prev + wrap_angle(y - prev));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn circle(r: f64, rate: f64, h: usize, dt: f64) -> FlatTrajectory {
        let wps = (0..=h)
            .map(|k| {
                let a = rate * k as f64 * dt;
                FlatWaypoint::new(Vector3::new(r * a.cos(), r * a.sin(), 1.0), 0.0)
            })
            .collect();
        let mut t = FlatTrajectory::new(wps, dt);
        // virtual points continue the circle
        let before = Vector3::new(r * (-rate * dt).cos(), r * (-rate * dt).sin(), 1.0);
        t.start_velocity = (t.waypoints[0].position - before) / dt;
        let a = rate * (h + 1) as f64 * dt;
        t.end_velocity = (Vector3::new(r * a.cos(), r * a.sin(), 1.0) - t.waypoints[h].position) / dt;
        t
    }

    #[test]
    fn hover() {
        let robot = Robot::quadrotor();
        let t = FlatTrajectory::straight_line(Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 1.0), 0.0, 6, 0.1);
        for (x, u) in derive_states(&t, &robot).unwrap() {
            assert_relative_eq!(x.rotation(), Matrix3::identity(), epsilon = 1e-12);
            let v = u.as_vector();
            assert_relative_eq!(v[0], robot.mass * robot.gravity, epsilon = 1e-12);
            assert_relative_eq!(v.fixed_rows::<3>(1).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_velocity_line() {
        let robot = Robot::quadrotor();
        let mut t = FlatTrajectory::straight_line(Vector3::zeros(), Vector3::new(1.0, 0.5, 0.2), 0.3, 10, 0.1);
        let v = Vector3::new(1.0, 0.5, 0.2);
        t.start_velocity = v;
        t.end_velocity = v;
        for (x, u) in derive_states(&t, &robot).unwrap() {
            assert_relative_eq!(x.velocity, v, epsilon = 1e-12);
            assert_relative_eq!(u.as_vector()[0], robot.mass * robot.gravity, epsilon = 1e-9);
            assert_relative_eq!(x.rotation(), so3_exp(&Vector3::new(0.0, 0.0, 0.3)), epsilon = 1e-12);
        }
    }

    #[test]
    fn circle_thrust_closed_form() {
        let robot = Robot::quadrotor();
        let (r, rate, dt) = (1.5, 1.2, 0.1);
        let t = circle(r, rate, 20, dt);
        // the central second difference of a uniformly sampled circle is
        // exactly centripetal with magnitude 2r(1 − cos ωΔt)/Δt²
        let a_disc = 2.0 * r * (1.0 - (rate * dt).cos()) / (dt * dt);
        let a_cont: f64 = rate * rate * r;
        let g = robot.gravity;
        for (x, u) in derive_states(&t, &robot).unwrap() {
            let thrust = u.as_vector()[0];
            assert_relative_eq!(thrust, robot.mass * (g * g + a_disc * a_disc).sqrt(), epsilon = 1e-9);
            // continuous-time value √(g² + ω⁴r²) differs only at O(Δt²)
            assert!((thrust - robot.mass * (g * g + a_cont * a_cont).sqrt()).abs() < 0.01);
            let radial = -x.position().xy().push(0.0).normalize();
            let expected = (radial * a_disc + Vector3::z() * g).normalize();
            assert_relative_eq!(x.rotation().column(2).into_owned(), expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn planar_cases() {
        let robot = Robot::planar([0.2, 0.1, 0.05]);
        let still = FlatTrajectory::straight_line(Vector3::zeros(), Vector3::zeros(), 0.4, 5, 0.1);
        for (_, u) in derive_states(&still, &robot).unwrap() {
            assert_eq!(u.as_vector(), Vector4::zeros());
        }
        // rotation in place at constant rate
        let rate = 0.7;
        let mut spin = FlatTrajectory::new(
            (0..=8).map(|k| FlatWaypoint::new(Vector3::zeros(), wrap_angle(rate * k as f64 * 0.1))).collect(),
            0.1,
        );
        spin.start_angular_velocity = Vector3::new(0.0, 0.0, rate);
        let states = derive_states(&spin, &robot).unwrap();
        for (k, (x, u)) in states.iter().enumerate() {
            if k < 8 {
                assert_relative_eq!(u.as_vector().norm(), 0.0, epsilon = 1e-9);
            }
            assert_relative_eq!(x.angular_velocity.z, rate, epsilon = 1e-9);
        }
        // uniform acceleration along a line
        let acc = Vector3::new(0.3, -0.2, 0.0);
        let wps: Vec<_> = (0..=8)
            .map(|k| FlatWaypoint::new(acc * (0.5 * (k as f64 * 0.1).powi(2)), 0.0))
            .collect();
        let mut line = FlatTrajectory::new(wps, 0.1);
        line.start_velocity = acc * -0.05;
        line.end_velocity = acc * 0.85;
        for (_, u) in derive_states(&line, &robot).unwrap() {
            let v = u.as_vector();
            assert_relative_eq!(v[0], robot.mass * acc.x, epsilon = 1e-9);
            assert_relative_eq!(v[1], robot.mass * acc.y, epsilon = 1e-9);
        }
    }

    #[test]
    fn free_fall_is_singular() {
        let robot = Robot::quadrotor();
        let dt = 0.1;
        let g = robot.gravity;
        let wps = (0..=6)
            .map(|k| FlatWaypoint::new(Vector3::new(0.0, 0.0, -0.5 * g * (k as f64 * dt).powi(2)), 0.0))
            .collect();
        let mut t = FlatTrajectory::new(wps, dt);
        t.start_velocity = Vector3::new(0.0, 0.0, 0.5 * g * dt);
        t.end_velocity = Vector3::new(0.0, 0.0, -g * 6.5 * dt);
        assert!(matches!(derive_states(&t, &robot), Err(DynamicsError::FreeFallSingularity { .. })));
        let short = FlatTrajectory::straight_line(Vector3::zeros(), Vector3::x(), 0.0, 3, dt);
        assert!(matches!(derive_states(&short, &robot), Err(DynamicsError::HorizonTooShort(3))));
    }

    #[test]
    fn swept_distances() {
        let body = BodyModel::grid(&BodySpec::default());
        let a = FullState::at_rest(Pose::from_yaw(0.3, Vector3::new(1.0, 2.0, 3.0)));
        assert!(swept_distance(&a, &a, &body).iter().all(|&s| s == 0.0));
        let d = Vector3::new(0.1, -0.2, 0.05);
        let b = FullState::at_rest(Pose::new(a.rotation(), a.position() + d));
        for s in swept_distance(&a, &b, &body) {
            assert_relative_eq!(s, d.norm(), epsilon = 1e-12);
        }
        let phi = 0.4;
        let o = FullState::at_rest(Pose::identity());
        let r = FullState::at_rest(Pose::from_yaw(phi, Vector3::zeros()));
        for (p, s) in body.points.iter().zip(swept_distance(&o, &r, &body)) {
            assert_relative_eq!(s, 2.0 * p.xy().norm() * (phi / 2.0).sin(), epsilon = 1e-9);
        }
    }

    #[test]
    fn simulator_equilibria() {
        let robot = Robot::quadrotor();
        let x = FullState::at_rest(Pose::from_translation(Vector3::new(0.0, 0.0, 1.0)));
        let next = step(&x, &Control::hover(&robot), &robot);
        assert_relative_eq!(next.position(), x.position(), epsilon = 1e-9);
        assert_relative_eq!(next.velocity, Vector3::zeros(), epsilon = 1e-9);
        let fall = step(&x, &Control::from_vector(ModelKind::Quadrotor, &Vector4::zeros()), &robot);
        assert_relative_eq!(fall.velocity, Vector3::new(0.0, 0.0, -robot.gravity * robot.dt), epsilon = 1e-12);
    }

    #[test]
    fn noise_is_seeded() {
        let robot = Robot::quadrotor();
        let x = FullState::at_rest(Pose::identity());
        let u = Control::hover(&robot);
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a = simulate_step(&x, &u, &robot, &robot.noise, &mut r1);
        let b = simulate_step(&x, &u, &robot, &robot.noise, &mut r2);
        assert_eq!(a, b);
        assert!((a.position() - x.position()).norm() > 0.0);
        // paper defaults
        let n = NoiseSpec::default();
        assert_eq!((n.position, n.rotation, n.velocity, n.angular_velocity), (0.02, 0.02, 0.01, 0.01));
    }

    fn fd_jacobian(x: &FullState, u: &Control, robot: &Robot) -> StateMatrix {
        let h = 1e-6;
        let base = step(x, u, robot);
        let mut j = StateMatrix::zeros();
        for k in 0..12 {
            let mut e = nalgebra::SVector::<f64, 12>::zeros();
            e[k] = h;
            let plus = step(&state_retract(x, &e), u, robot);
            let minus = step(&state_retract(x, &-e), u, robot);
            let col = (state_difference(&plus, &base) - state_difference(&minus, &base)) / (2.0 * h);
            j.set_column(k, &col);
        }
        j
    }

    fn assert_jacobian_close(a: &StateMatrix, b: &StateMatrix) {
        for r in 0..12 {
            for c in 0..12 {
                let (x, y) = (a[(r, c)], b[(r, c)]);
                assert!((x - y).abs() <= 1e-4 * y.abs().max(1e-3), "entry ({r},{c}): {x} vs {y}");
            }
        }
    }

    #[test]
    fn jacobian_at_hover_matches_finite_differences() {
        let robot = Robot::quadrotor();
        let x = FullState::at_rest(Pose::from_translation(Vector3::new(0.0, 0.0, 1.0)));
        let u = Control::hover(&robot);
        let a = dynamics_jacobian(&x, &u, &robot);
        assert_relative_eq!(a.fixed_view::<3, 3>(3, 6).into_owned(), Matrix3::identity() * robot.dt);
        assert_jacobian_close(&a, &fd_jacobian(&x, &u, &robot));
    }

    #[test]
    fn jacobian_at_generic_state_matches_finite_differences() {
        let robot = Robot {
            inertia: [0.01, 0.015, 0.02],
            ..Robot::quadrotor()
        };
        let x = FullState {
            pose: Pose::new(so3_exp(&Vector3::new(0.2, -0.3, 0.7)), Vector3::new(0.3, 0.1, 1.0)),
            velocity: Vector3::new(0.5, -0.2, 0.1),
            angular_velocity: Vector3::new(0.4, -0.8, 1.1),
        };
        let u = Control::Quadrotor {
            thrust: 11.0,
            torque: Vector3::new(0.01, -0.02, 0.005),
        };
        assert_jacobian_close(&dynamics_jacobian(&x, &u, &robot), &fd_jacobian(&x, &u, &robot));
    }

    #[test]
    fn planar_jacobian_structure() {
        let robot = Robot::planar([0.2, 0.1, 0.05]);
        let x = FullState {
            pose: Pose::from_yaw(0.8, Vector3::new(0.5, -0.3, 0.0)),
            velocity: Vector3::new(0.2, 0.1, 0.0),
            angular_velocity: Vector3::new(0.0, 0.0, 0.6),
        };
        let u = Control::Planar { force: [0.3, -0.1], torque: 0.02 };
        let a = dynamics_jacobian(&x, &u, &robot);
        // (x, y, yaw) each a discrete double integrator, decoupled from everything else
        let dt = robot.dt;
        let planar = [(3usize, 6usize), (4, 7), (2, 11)];
        for &(pos, vel) in &planar {
            for c in 0..12 {
                let expect_pos = if c == pos { 1.0 } else if c == vel { dt } else { 0.0 };
                assert_relative_eq!(a[(pos, c)], expect_pos, epsilon = 1e-12);
                let expect_vel = if c == vel { 1.0 } else { 0.0 };
                assert_relative_eq!(a[(vel, c)], expect_vel, epsilon = 1e-12);
            }
        }
        assert_jacobian_close(&a, &fd_jacobian(&x, &u, &robot));
    }

    #[test]
    fn robot_json_round_trip() {
        let r = Robot::planar([0.3, 0.15, 0.1]);
        let back = Robot::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    fn smooth_trajectory(seed: [f64; 6], h: usize, dt: f64) -> FlatTrajectory {
        let f = |t: f64| {
            Vector3::new(
                seed[0] * (0.9 * t).sin() + 0.3 * t,
                seed[1] * (0.7 * t + 0.3).cos(),
                1.0 + seed[2] * (1.1 * t).sin(),
            )
        };
        let yaw = |t: f64| seed[3] * (0.5 * t).sin() + seed[4];
        let wps = (0..=h).map(|k| FlatWaypoint::new(f(k as f64 * dt), yaw(k as f64 * dt))).collect();
        let mut traj = FlatTrajectory::new(wps, dt);
        traj.start_velocity = (f(0.0) - f(-dt)) / dt;
        traj.end_velocity = (f((h + 1) as f64 * dt) - f(h as f64 * dt)) / dt;
        traj.start_angular_velocity = Vector3::new(seed[5], 0.0, 0.0);
        traj
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn controls_reproduce_waypoints(s in proptest::array::uniform6(-0.5f64..0.5)) {
            let robot = Robot::quadrotor();
            let traj = smooth_trajectory(s, 20, 0.1);
            let states = derive_states(&traj, &robot).unwrap();
            let mut x = states[0].0;
            for (k, (_, u)) in states.iter().enumerate().take(20) {
                x = step(&x, u, &robot);
                let target = &states[k + 1].0;
                prop_assert!((x.position() - target.position()).norm() < 1e-9);
                prop_assert!((x.velocity - target.velocity).norm() < 1e-9);
                prop_assert!(crate::geom::rotation_angle(&(x.rotation().transpose() * target.rotation())) < 1e-9);
            }
            for pair in states.windows(2) {
                prop_assert!(crate::geom::rotation_angle(&(pair[0].0.rotation().transpose() * pair[1].0.rotation())) < 0.5);
            }
        }

        #[test]
        fn swept_distance_rigid_invariance(yaw in -3.0f64..3.0, t in proptest::array::uniform3(-2.0f64..2.0)) {
            let body = BodyModel::grid(&BodySpec::default());
            let a = FullState::at_rest(Pose::new(so3_exp(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(0.0, 1.0, 2.0)));
            let b = FullState::at_rest(Pose::new(so3_exp(&Vector3::new(-0.2, 0.1, 0.5)), Vector3::new(0.3, 0.8, 2.1)));
            let g = Pose::new(so3_exp(&Vector3::new(0.0, 0.4, yaw)), Vector3::from(t));
            let ga = FullState::at_rest(g * a.pose);
            let gb = FullState::at_rest(g * b.pose);
            for (x, y) in swept_distance(&a, &b, &body).iter().zip(swept_distance(&ga, &gb, &body)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pinned_first_step_is_reachable() {
        let robot = Robot::quadrotor();
        let start = FullState {
            pose: Pose::new(so3_exp(&Vector3::new(0.1, -0.05, 0.3)), Vector3::new(0.0, 0.0, 1.0)),
            velocity: Vector3::new(0.2, 0.0, 0.0),
            angular_velocity: Vector3::new(0.0, 0.1, 0.0),
        };
        let traj = FlatTrajectory::straight_line(start.position(), Vector3::new(1.0, 0.5, 1.2), 0.3, 10, 0.1)
            .pinned_to(&start)
            .with_feasible_first_step(&robot);
        let d = derive_states(&traj, &robot).unwrap();
        let x1 = step(&d[0].0, &d[0].1, &robot);
        assert!((x1.position() - d[1].0.position()).norm() < 1e-12);
        assert!((x1.rotation() - d[1].0.rotation()).norm() < 1e-12);
        let again = traj.clone().with_feasible_first_step(&robot);
        assert!((again.waypoints[1].position - traj.waypoints[1].position).norm() < 1e-14);
    }

}

//! Trajectory optimization through a density field.
//!
//! Decision variables are the interior flat outputs `σ₁…σ_{h−1}`; the
//! endpoints stay pinned. The cost is
//! `Σ_τ Σ_b ρ(R_τ b + p_τ)·‖Δ_b‖ + Σ_τ u_τᵀ Γ u_τ`, and its gradient is exact:
//! every term only touches five consecutive waypoints, so it is evaluated on
//! `Dual<20>` numbers seeded at that window.

use crate::autodiff::{v3, Dual, Real};
use crate::dynamics::{
    derive_states, BodyModel, Control, DynamicsError, FlatMap, FlatTrajectory, FlatWaypoint, FlatWindow,
    FullState, ModelKind, Robot,
};
use crate::exec::ExecPolicy;
use crate::field::{OccupancyOracle, RadianceField};
use crate::geom::wrap_angle;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Waypoints on each side of a cost term that influence it.
const REACH: isize = 2;
type D = Dual<20>;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("{which} position {position:?} is inside an obstacle")]
    StartOrGoalOccupied { which: &'static str, position: [f64; 3] },
    #[error("cost became non-finite at iteration {iteration}")]
    NonFiniteCost { iteration: usize, best: Box<PlanResult> },
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plan file: {0}")]
    Format(String),
}

/// What the first control channel of a quadrotor is penalized against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThrustPenalty {
    /// `(f − m g)²`: hovering is free.
    #[default]
    DeviationFromHover,
    /// `f²`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Exact,
    /// Central differences on the full cost; slow, for cross-checking.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawInit {
    /// Interior waypoints look along the path.
    #[default]
    FaceTravel,
    /// Linear blend between the start and goal yaw.
    Interpolate,
}

/// Stop once the cost changed by less than `rel_tol` (relative) over the
/// last `window` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            window: 25,
            rel_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub horizon: usize,
    /// Diagonal of Γ, in control-vector order.
    pub control_weights: [f64; 4],
    pub thrust_penalty: ThrustPenalty,
    pub learning_rate: f64,
    /// Step size for yaw; `None` uses `learning_rate`.
    pub yaw_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    pub warm_iterations: usize,
    /// A* grid spacing (m).
    pub grid_resolution: f64,
    /// Density above which an A* cell is blocked.
    pub occupancy_threshold: f64,
    /// Density samples along each body point's chord per timestep. With 1
    /// only the start of the move is evaluated.
    pub collision_samples: usize,
    pub gradient: GradientMode,
    pub convergence: Option<Convergence>,
    pub yaw_init: YawInit,
    pub policy: ExecPolicy,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            control_weights: [1e-3; 4],
            thrust_penalty: ThrustPenalty::default(),
            learning_rate: 1e-3,
            yaw_learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            iterations: 2500,
            warm_iterations: 250,
            grid_resolution: 0.1,
            occupancy_threshold: 1.0,
            collision_samples: 1,
            gradient: GradientMode::default(),
            convergence: None,
            yaw_init: YawInit::default(),
            policy: ExecPolicy::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::InvalidConfig(m.into()));
        if self.horizon < 4 {
            return bad("horizon must be at least 4");
        }
        if self.control_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("control weights must be non-negative");
        }
        if !(self.learning_rate > 0.0) || self.yaw_learning_rate.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.grid_resolution > 0.0) {
            return bad("grid resolution must be positive");
        }
        if self.collision_samples == 0 {
            return bad("collision samples must be at least 1");
        }
        Ok(())
    }
}

/// The two parts of the planning cost.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostTerms {
    pub collision: f64,
    pub control: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.collision + self.control
    }
}

/// Gradient with respect to every waypoint's `(x, y, z, ψ)`; pinned
/// waypoints and frozen coordinates are zero.
pub type Gradient = Vec<[f64; 4]>;

/// Everything the cost needs besides the trajectory.
#[derive(Clone, Copy)]
pub struct Problem<'a, F: ?Sized> {
    pub field: &'a F,
    pub robot: &'a Robot,
    pub body: &'a BodyModel,
    pub config: &'a PlannerConfig,
}

impl<'a, F: RadianceField + ?Sized> Problem<'a, F> {
    pub fn new(field: &'a F, robot: &'a Robot, body: &'a BodyModel, config: &'a PlannerConfig) -> Self {
        Self {
            field,
            robot,
            body,
            config,
        }
    }

    /// Coordinates the optimizer may move: planar robots keep their height.
    fn free(&self) -> [bool; 4] {
        match self.robot.model {
            ModelKind::Quadrotor => [true; 4],
            ModelKind::Planar => [true, true, false, true],
        }
    }

    fn control_penalty<T: Real>(&self, u: &[T; 4]) -> T {
        let g = &self.config.control_weights;
        let mut u0 = u[0];
        if self.robot.model == ModelKind::Quadrotor && self.config.thrust_penalty == ThrustPenalty::DeviationFromHover {
            u0 = u0 - self.robot.hover_thrust();
        }
        u0 * u0 * g[0] + u[1] * u[1] * g[1] + u[2] * u[2] * g[2] + u[3] * u[3] * g[3]
    }

    /// Cost term `τ`: collision along the move `τ → τ+1` plus the control at `τ`.
    fn term<T: Real>(&self, map: &FlatMap, w: &FlatWindow<T>, tau: isize) -> Result<(T, T), DynamicsError> {
        let r0 = map.rotation(w, tau)?;
        let r1 = map.rotation(w, tau + 1)?;
        let p0 = &w.pos[(tau - w.first) as usize];
        let p1 = &w.pos[(tau + 1 - w.first) as usize];
        let mut collision = T::cst(0.0);
        for b in &self.body.points {
            let b = [b.x, b.y, b.z];
            let x0 = v3::add(&v3::mat_vec_f(&r0, &b), p0);
            let x1 = v3::add(&v3::mat_vec_f(&r1, &b), p1);
            let s = v3::norm_or_zero(&v3::sub(&x1, &x0));
            if s.value() == 0.0 {
                continue;
            }
            let q = self.config.collision_samples.max(1);
            let d = v3::sub(&x1, &x0);
            for k in 0..q {
                let x = v3::add(&x0, &v3::scale_f(&d, k as f64 / q as f64));
                let (rho, grad) = self.field.density_with_gradient(&Vector3::from(v3::values(&x)));
                if rho == 0.0 && grad == Vector3::zeros() {
                    continue;
                }
                collision = collision + T::lift(rho, &[grad.x, grad.y, grad.z], &x) * s * T::cst(1.0 / q as f64);
            }
        }
        let u = map.control(w, tau)?;
        Ok((collision, self.control_penalty(&u)))
    }

    fn window_bounds(h: usize, tau: isize) -> (isize, usize) {
        let first = (tau - REACH).max(-1);
        let last = (tau + REACH).min(h as isize + 1);
        (first, (last - first + 1) as usize)
    }

    /// Cost of a trajectory.
    pub fn cost(&self, traj: &FlatTrajectory) -> Result<CostTerms, PlanError> {
        traj.validate()?;
        let h = traj.horizon();
        let map = FlatMap::new(traj, self.robot);
        let w = traj.window::<f64>(-1, h + 3);
        let terms = self
            .config
            .policy
            .map(h, |tau| self.term(&map, &w, tau as isize));
        let mut out = CostTerms::default();
        for t in terms {
            let (c, u) = t?;
            out.collision += c;
            out.control += u;
        }
        Ok(out)
    }

    /// Cost and exact gradient.
    pub fn cost_and_gradient(&self, traj: &FlatTrajectory) -> Result<(CostTerms, Gradient), PlanError> {
        traj.validate()?;
        let h = traj.horizon();
        let map = FlatMap::new(traj, self.robot);
        let free = self.free();
        let terms = self.config.policy.map(h, |tau| {
            let tau = tau as isize;
            let (first, len) = Self::window_bounds(h, tau);
            let mut w = traj.window::<D>(first, len);
            for k in 0..len {
                let j = first + k as isize;
                if j < 1 || j >= h as isize {
                    continue;
                }
                for c in 0..3 {
                    if free[c] {
                        w.pos[k][c] = D::variable(w.pos[k][c].re, 4 * k + c);
                    }
                }
                w.yaw[k] = D::variable(w.yaw[k].re, 4 * k + 3);
            }
            self.term(&map, &w, tau).map(|t| (first, len, t))
        });
        let mut grad = vec![[0.0; 4]; h + 1];
        let mut out = CostTerms::default();
        for t in terms {
            let (first, len, (c, u)) = t?;
            out.collision += c.re;
            out.control += u.re;
            let total = c + u;
            for k in 0..len {
                let j = first + k as isize;
                if j < 1 || j >= h as isize {
                    continue;
                }
                for c in 0..4 {
                    grad[j as usize][c] += total.eps[4 * k + c];
                }
            }
        }
        Ok((out, grad))
    }

    /// Central-difference gradient of [`cost`](Self::cost).
    pub fn finite_difference_gradient(&self, traj: &FlatTrajectory, step: f64) -> Result<Gradient, PlanError> {
        let h = traj.horizon();
        let free = self.free();
        let mut grad = vec![[0.0; 4]; h + 1];
        let mut t = traj.clone();
        for j in 1..h {
            for c in 0..4 {
                if c < 3 && !free[c] {
                    continue;
                }
                let orig = coord(&t.waypoints[j], c);
                set_coord(&mut t.waypoints[j], c, orig + step);
                let plus = self.cost(&t)?.total();
                set_coord(&mut t.waypoints[j], c, orig - step);
                let minus = self.cost(&t)?.total();
                set_coord(&mut t.waypoints[j], c, orig);
                grad[j][c] = (plus - minus) / (2.0 * step);
            }
        }
        Ok(grad)
    }

    fn gradient(&self, traj: &FlatTrajectory) -> Result<(CostTerms, Gradient), PlanError> {
        match self.config.gradient {
            GradientMode::Exact => self.cost_and_gradient(traj),
            GradientMode::FiniteDifference => Ok((self.cost(traj)?, self.finite_difference_gradient(traj, 1e-6)?)),
        }
    }

    /// Adam on the interior waypoints for at most `iterations` steps.
    pub fn optimize(&self, init: &FlatTrajectory, iterations: usize) -> Result<PlanResult, PlanError> {
        self.optimize_observed(init, iterations, |_, _, _| {})
    }

    /// [`optimize`](Self::optimize), calling `observe(iteration, iterate, cost)`
    /// before every update.
    pub fn optimize_observed<O>(&self, init: &FlatTrajectory, iterations: usize, mut observe: O) -> Result<PlanResult, PlanError>
    where
        O: FnMut(usize, &FlatTrajectory, &CostTerms),
    {
        self.config.validate()?;
        init.validate()?;
        let cfg = self.config;
        let h = init.horizon();
        let free = self.free();
        let lr = [
            cfg.learning_rate,
            cfg.learning_rate,
            cfg.learning_rate,
            cfg.yaw_learning_rate.unwrap_or(cfg.learning_rate),
        ];
        let mut traj = init.clone().with_feasible_first_step(self.robot);
        let mut m = vec![[0.0; 4]; h + 1];
        let mut v = vec![[0.0; 4]; h + 1];
        let mut trace: Vec<CostTerms> = Vec::new();
        let mut best: Option<(f64, FlatTrajectory)> = None;
        let mut converged = false;
        for it in 0..iterations {
            let step = self.gradient(&traj);
            let (terms, grad) = match step {
                Ok(s) if s.0.total().is_finite() && s.1.iter().flatten().all(|g| g.is_finite()) => s,
                Ok(_) | Err(PlanError::Dynamics(DynamicsError::FreeFallSingularity { .. })) => {
                    let fallback = best.map(|b| b.1).unwrap_or_else(|| init.clone());
                    let best = self.result(fallback, trace, false)?;
                    return Err(PlanError::NonFiniteCost {
                        iteration: it,
                        best: Box::new(best),
                    });
                }
                Err(e) => return Err(e),
            };
            observe(it, &traj, &terms);
            trace.push(terms);
            if best.as_ref().is_none_or(|b| terms.total() < b.0) {
                best = Some((terms.total(), traj.clone()));
            }
            if let Some(c) = cfg.convergence {
                if trace.len() > c.window {
                    let old = trace[trace.len() - 1 - c.window].total();
                    if (old - terms.total()).abs() <= c.rel_tol * terms.total().abs().max(f64::MIN_POSITIVE) {
                        converged = true;
                        break;
                    }
                }
            }
            let t = (it + 1) as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for j in 1..h {
                for c in 0..4 {
                    if c < 3 && !free[c] {
                        continue;
                    }
                    let g = grad[j][c];
                    m[j][c] = cfg.beta1 * m[j][c] + (1.0 - cfg.beta1) * g;
                    v[j][c] = cfg.beta2 * v[j][c] + (1.0 - cfg.beta2) * g * g;
                    let mhat = m[j][c] / bc1;
                    let vhat = v[j][c] / bc2;
                    let delta = lr[c] * mhat / (vhat.sqrt() + 1e-8);
                    let x = coord(&traj.waypoints[j], c);
                    set_coord(&mut traj.waypoints[j], c, x - delta);
                }
            }
            traj = traj.with_feasible_first_step(self.robot);
        }
        self.result(traj, trace, converged)
    }

    fn result(&self, traj: FlatTrajectory, trace: Vec<CostTerms>, converged: bool) -> Result<PlanResult, PlanError> {
        let derived = derive_states(&traj, self.robot)?;
        let (states, controls) = derived.into_iter().unzip();
        Ok(PlanResult {
            iterations: trace.len(),
            trajectory: traj,
            states,
            controls,
            trace,
            converged,
            astar_fallback: false,
        })
    }

    /// A* initialization followed by a cold-start optimization.
    pub fn plan(&self, start: &FullState, goal: &FlatWaypoint) -> Result<PlanResult, PlanError> {
        self.config.validate()?;
        let planar = self.robot.model == ModelKind::Planar;
        let path = astar_path(self.field, &start.position(), &goal.position, self.config, planar)?;
        let init = initial_trajectory(
            &path.points,
            start.yaw(),
            goal.yaw,
            self.config.horizon,
            self.robot.dt,
            self.config.yaw_init,
        )
        .pinned_to(start);
        let mut result = self.optimize(&init, self.config.iterations)?;
        result.astar_fallback = path.fallback;
        Ok(result)
    }

    /// Re-plan from a new start using the previous solution.
    pub fn replan(&self, previous: &FlatTrajectory, start: &FullState) -> Result<PlanResult, PlanError> {
        let init = warm_start(previous, start);
        self.optimize(&init, self.config.warm_iterations)
    }
}

fn coord(w: &FlatWaypoint, c: usize) -> f64 {
    if c < 3 {
        w.position[c]
    } else {
        w.yaw
    }
}

fn set_coord(w: &mut FlatWaypoint, c: usize, x: f64) {
    if c < 3 {
        w.position[c] = x;
    } else {
        w.yaw = x;
    }
}

/// Collision part of the cost only.
pub fn collision_cost<F: RadianceField + ?Sized>(
    traj: &FlatTrajectory,
    field: &F,
    robot: &Robot,
    body: &BodyModel,
) -> Result<f64, PlanError> {
    let cfg = PlannerConfig::default();
    Ok(Problem::new(field, robot, body, &cfg).cost(traj)?.collision)
}

/// Control part of the cost only.
pub fn control_cost(traj: &FlatTrajectory, robot: &Robot, config: &PlannerConfig) -> Result<f64, PlanError> {
    let field = crate::field::AnalyticScene::empty(crate::field::Aabb::cube(1.0));
    let body = BodyModel::single_point();
    Ok(Problem::new(&field, robot, &body, config).cost(traj)?.control)
}

/// Drop the first waypoint and pin the new start; short horizons are padded
/// with copies of the goal.
pub fn warm_start(previous: &FlatTrajectory, start: &FullState) -> FlatTrajectory {
    let mut wps: Vec<FlatWaypoint> = previous.waypoints.iter().skip(1).copied().collect();
    let goal = *previous.waypoints.last().expect("non-empty trajectory");
    while wps.len() < 5 {
        wps.push(goal);
    }
    wps[0].yaw = start.yaw();
    let unwrapped = crate::dynamics::unwrap_yaw(&wps.iter().map(|w| w.yaw).collect::<Vec<_>>());
    for (w, y) in wps.iter_mut().zip(unwrapped) {
        w.yaw = y;
    }
    FlatTrajectory {
        waypoints: wps,
        ..previous.clone()
    }
    .pinned_to(start)
}

/// Count of `(timestep, body point)` pairs inside an obstacle.
pub fn intersection_count<O: OccupancyOracle + ?Sized>(states: &[FullState], oracle: &O, body: &BodyModel) -> usize {
    states
        .iter()
        .map(|s| {
            body.points
                .iter()
                .filter(|b| oracle.occupied(&s.pose.transform_point(b)))
                .count()
        })
        .sum()
}

/// Occupied body volume summed over timesteps (m³·steps).
pub fn intersection_volume<O: OccupancyOracle + ?Sized>(states: &[FullState], oracle: &O, body: &BodyModel) -> f64 {
    states
        .iter()
        .map(|s| {
            body.points
                .iter()
                .zip(&body.weights)
                .filter(|(b, _)| oracle.occupied(&s.pose.transform_point(b)))
                .map(|(_, w)| w)
                .sum::<f64>()
        })
        .sum()
}

pub const PLAN_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PlanFile {
    format_version: u32,
    #[serde(flatten)]
    plan: PlanResult,
}

/// Output of one optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub trajectory: FlatTrajectory,
    pub states: Vec<FullState>,
    pub controls: Vec<Control>,
    /// Cost at the start of every iteration.
    pub trace: Vec<CostTerms>,
    pub iterations: usize,
    pub converged: bool,
    pub astar_fallback: bool,
}

impl PlanResult {
    pub fn final_cost(&self) -> Option<CostTerms> {
        self.trace.last().copied()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), PlanError> {
        let file = PlanFile {
            format_version: PLAN_FORMAT_VERSION,
            plan: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self, PlanError> {
        let file: PlanFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.format_version != PLAN_FORMAT_VERSION {
            return Err(PlanError::Format(format!("unsupported format_version {}", file.format_version)));
        }
        Ok(file.plan)
    }

    /// One row per timestep: `t,x,y,z,yaw,vx,vy,vz,wx,wy,wz,u0,u1,u2,u3`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), PlanError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "t,x,y,z,yaw,vx,vy,vz,wx,wy,wz,u0,u1,u2,u3")?;
        let dt = self.trajectory.dt;
        for (k, (s, u)) in self.states.iter().zip(&self.controls).enumerate() {
            let p = s.position();
            let v = s.velocity;
            let w = s.angular_velocity;
            let u = u.as_vector();
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                k as f64 * dt,
                p.x,
                p.y,
                p.z,
                self.trajectory.waypoints[k].yaw,
                v.x,
                v.y,
                v.z,
                w.x,
                w.y,
                w.z,
                u[0],
                u[1],
                u[2],
                u[3]
            )?;
        }
        Ok(())
    }
}

/// A* result, already resampled to `h + 1` points.
#[derive(Debug, Clone, PartialEq)]
pub struct AstarPath {
    /// Shortcut polyline from start to goal.
    pub polyline: Vec<Vector3<f64>>,
    pub points: Vec<Vector3<f64>>,
    /// No grid path existed; `points` is the straight segment.
    pub fallback: bool,
}

struct Grid {
    origin: Vector3<f64>,
    res: f64,
    dims: [usize; 3],
    blocked: Vec<bool>,
}

impl Grid {
    fn new<F: RadianceField + ?Sized>(field: &F, res: f64, threshold: f64, layer: Option<f64>, policy: ExecPolicy) -> Self {
        let b = field.bounds();
        let ext = b.extent();
        let mut dims = [0; 3];
        for i in 0..3 {
            dims[i] = ((ext[i] / res).ceil() as usize).max(1);
        }
        let mut origin = b.min;
        if let Some(z) = layer {
            dims[2] = 1;
            origin.z = z - 0.5 * res;
        }
        let mut grid = Self {
            origin,
            res,
            dims,
            blocked: Vec::new(),
        };
        let n = dims[0] * dims[1] * dims[2];
        grid.blocked = policy.map(n, |i| field.density(&grid.center(grid.unflat(i))) > threshold);
        grid
    }

    fn unflat(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    fn center(&self, c: [usize; 3]) -> Vector3<f64> {
        self.origin + Vector3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * self.res
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        let mut c = [0; 3];
        for i in 0..3 {
            let k = ((p[i] - self.origin[i]) / self.res).floor();
            c[i] = (k.max(0.0) as usize).min(self.dims[i] - 1);
        }
        c
    }
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    h: f64,
    index: usize,
}

impl Eq for Open {}

impl Ord for Open {
    // Reversed so that `BinaryHeap` pops the smallest `(f, h, index)`.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(other.h.total_cmp(&self.h))
            .then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn segment_free<F: RadianceField + ?Sized>(field: &F, a: &Vector3<f64>, b: &Vector3<f64>, res: f64, threshold: f64) -> bool {
    let n = (((b - a).norm() / (0.25 * res)).ceil() as usize).max(1);
    (0..=n).all(|k| field.density(&(a + (b - a) * (k as f64 / n as f64))) <= threshold)
}

/// Grid search over cells whose center density is at most the threshold,
/// 26-connected in 3-D or 8-connected in the start's horizontal layer.
/// The cell path is shortcut wherever a straight segment stays free and then
/// resampled by arc length to `horizon + 1` points.
pub fn astar_path<F: RadianceField + ?Sized>(
    field: &F,
    start: &Vector3<f64>,
    goal: &Vector3<f64>,
    config: &PlannerConfig,
    planar: bool,
) -> Result<AstarPath, PlanError> {
    let (res, thr) = (config.grid_resolution, config.occupancy_threshold);
    for (which, p) in [("start", start), ("goal", goal)] {
        if field.density(p) > thr {
            return Err(PlanError::StartOrGoalOccupied {
                which,
                position: [p.x, p.y, p.z],
            });
        }
    }
    let grid = Grid::new(field, res, thr, planar.then_some(start.z), config.policy);
    let s = grid.flat(grid.cell_of(start));
    let g = grid.flat(grid.cell_of(goal));
    let cells = match search(&grid, s, g, planar) {
        Some(c) => c,
        None => {
            log::warn!("no grid path from {start:?} to {goal:?}; using the straight segment");
            let polyline = vec![*start, *goal];
            return Ok(AstarPath {
                points: resample(&polyline, config.horizon),
                polyline,
                fallback: true,
            });
        }
    };
    let mut raw = vec![*start];
    raw.extend(cells[1..cells.len().saturating_sub(1)].iter().map(|&i| {
        let mut c = grid.center(grid.unflat(i));
        if planar {
            c.z = start.z;
        }
        c
    }));
    raw.push(*goal);
    let polyline = shortcut(field, &raw, res, thr);
    Ok(AstarPath {
        points: resample(&polyline, config.horizon),
        polyline,
        fallback: false,
    })
}

fn search(grid: &Grid, start: usize, goal: usize, planar: bool) -> Option<Vec<usize>> {
    let n = grid.blocked.len();
    let goal_c = grid.center(grid.unflat(goal));
    let heuristic = |i: usize| (grid.center(grid.unflat(i)) - goal_c).norm();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    g[start] = 0.0;
    open.push(Open {
        f: heuristic(start),
        h: heuristic(start),
        index: start,
    });
    let dz: &[i64] = if planar { &[0] } else { &[-1, 0, 1] };
    while let Some(Open { index, .. }) = open.pop() {
        if closed[index] {
            continue;
        }
        if index == goal {
            let mut path = vec![goal];
            let mut k = goal;
            while k != start {
                k = parent[k];
                path.push(k);
            }
            path.reverse();
            return Some(path);
        }
        closed[index] = true;
        let c = grid.unflat(index);
        for &oz in dz {
            for oy in -1i64..=1 {
                for ox in -1i64..=1 {
                    if ox == 0 && oy == 0 && oz == 0 {
                        continue;
                    }
                    let nc = [c[0] as i64 + ox, c[1] as i64 + oy, c[2] as i64 + oz];
                    if (0..3).any(|i| nc[i] < 0 || nc[i] >= grid.dims[i] as i64) {
                        continue;
                    }
                    let nc = [nc[0] as usize, nc[1] as usize, nc[2] as usize];
                    let ni = grid.flat(nc);
                    if closed[ni] || (grid.blocked[ni] && ni != goal) {
                        continue;
                    }
                    let step = ((ox * ox + oy * oy + oz * oz) as f64).sqrt() * grid.res;
                    let cand = g[index] + step;
                    if cand < g[ni] {
                        g[ni] = cand;
                        parent[ni] = index;
                        let h = heuristic(ni);
                        open.push(Open { f: cand + h, h, index: ni });
                    }
                }
            }
        }
    }
    None
}

fn shortcut<F: RadianceField + ?Sized>(field: &F, pts: &[Vector3<f64>], res: f64, thr: f64) -> Vec<Vector3<f64>> {
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i + 1 < pts.len() {
        let mut j = pts.len() - 1;
        while j > i + 1 && !segment_free(field, &pts[i], &pts[j], res, thr) {
            j -= 1;
        }
        out.push(pts[j]);
        i = j;
    }
    out
}

/// `n + 1` points evenly spaced by arc length along a polyline.
pub fn resample(polyline: &[Vector3<f64>], n: usize) -> Vec<Vector3<f64>> {
    let mut cum = vec![0.0];
    for w in polyline.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cum.last().unwrap();
    let mut seg = 0;
    (0..=n)
        .map(|k| {
            if k == n {
                return *polyline.last().unwrap();
            }
            let s = total * k as f64 / n as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            if len <= 0.0 {
                return polyline[seg];
            }
            polyline[seg] + (polyline[seg + 1] - polyline[seg]) * ((s - cum[seg]) / len)
        })
        .collect()
}

/// Flat trajectory through `points` with the requested yaw profile; the yaw
/// sequence is unwrapped and starts at `start_yaw`.
pub fn initial_trajectory(
    points: &[Vector3<f64>],
    start_yaw: f64,
    goal_yaw: f64,
    horizon: usize,
    dt: f64,
    yaw_init: YawInit,
) -> FlatTrajectory {
    let pts = if points.len() == horizon + 1 {
        points.to_vec()
    } else {
        resample(points, horizon)
    };
    let n = pts.len();
    let mut yaw = vec![start_yaw; n];
    match yaw_init {
        YawInit::FaceTravel => {
            let mut heading = start_yaw;
            for k in 1..n - 1 {
                let d = pts[k + 1] - pts[k - 1];
                if d.x.hypot(d.y) > 1e-9 {
                    heading = d.y.atan2(d.x);
                }
                yaw[k] = heading;
            }
        }
        YawInit::Interpolate => {
            let span = wrap_angle(goal_yaw - start_yaw);
            for (k, y) in yaw.iter_mut().enumerate() {
                *y = start_yaw + span * k as f64 / (n - 1) as f64;
            }
        }
    }
    yaw[n - 1] = goal_yaw;
    let yaw = crate::dynamics::unwrap_yaw(&yaw);
    let wps = pts.iter().zip(yaw).map(|(p, y)| FlatWaypoint::new(*p, y)).collect();
    FlatTrajectory::new(wps, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Aabb, AnalyticScene, Primitive};
    use crate::geom::Pose;
    use approx::assert_relative_eq;

    fn block_scene() -> AnalyticScene {
        AnalyticScene::empty(Aabb::new(Vector3::new(-2.0, -2.0, 0.0), Vector3::new(2.0, 2.0, 2.0))).with_primitive(
            Primitive::cuboid(Pose::from_translation(Vector3::new(0.0, 0.0, 1.0)), [0.3, 0.3, 1.0], 50.0, [0.8, 0.2, 0.2])
                .with_softness(0.05),
        )
    }

    fn wiggly(h: usize) -> FlatTrajectory {
        let wps = (0..=h)
            .map(|k| {
                let s = k as f64 / h as f64;
                FlatWaypoint::new(
                    Vector3::new(-1.5 + 3.0 * s, 0.1 * (7.0 * s).sin(), 1.0 + 0.05 * (5.0 * s).cos()),
                    0.2 * s,
                )
            })
            .collect();
        FlatTrajectory::new(wps, 0.1)
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let scene = block_scene();
        for robot in [Robot::quadrotor(), Robot::planar([0.1, 0.05, 0.05])] {
            let body = robot.body_model();
            let cfg = PlannerConfig::default();
            let prob = Problem::new(&scene, &robot, &body, &cfg);
            let traj = wiggly(12);
            let (terms, g) = prob.cost_and_gradient(&traj).unwrap();
            assert_relative_eq!(terms.total(), prob.cost(&traj).unwrap().total(), max_relative = 1e-12);
            let fd = prob.finite_difference_gradient(&traj, 1e-6).unwrap();
            let scale = fd.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in g.iter().flatten().zip(fd.iter().flatten()) {
                assert!((a - b).abs() <= 1e-2 * scale + 1e-6, "{a} vs {b}");
            }
            assert_eq!(g[0], [0.0; 4]);
            assert_eq!(g[12], [0.0; 4]);
        }
    }

    #[test]
    fn empty_scene_costs_only_control() {
        let scene = AnalyticScene::empty(Aabb::cube(3.0));
        let robot = Robot::quadrotor();
        let body = robot.body_model();
        let traj = wiggly(10);
        assert_eq!(collision_cost(&traj, &scene, &robot, &body).unwrap(), 0.0);
    }

    #[test]
    fn uniform_density_gives_path_length() {
        let field = crate::field::UniformField {
            bounds: Aabb::cube(5.0),
            density: 1.0,
            color: Vector3::zeros(),
        };
        let robot = Robot::quadrotor();
        let body = BodyModel::single_point();
        let traj = FlatTrajectory::straight_line(Vector3::zeros(), Vector3::new(1.2, 0.0, 0.0), 0.0, 8, 0.1);
        assert_relative_eq!(collision_cost(&traj, &field, &robot, &body).unwrap(), 1.2, epsilon = 1e-12);
    }

    #[test]
    fn hover_control_cost() {
        let robot = Robot::quadrotor();
        let traj = FlatTrajectory::straight_line(Vector3::zeros(), Vector3::zeros(), 0.0, 6, 0.1);
        let mut cfg = PlannerConfig::default();
        assert_eq!(control_cost(&traj, &robot, &cfg).unwrap(), 0.0);
        cfg.thrust_penalty = ThrustPenalty::Raw;
        let expect = 6.0 * 1e-3 * (robot.mass * robot.gravity).powi(2);
        assert_relative_eq!(control_cost(&traj, &robot, &cfg).unwrap(), expect, max_relative = 1e-12);
        cfg.control_weights = [2e-3; 4];
        assert_relative_eq!(control_cost(&traj, &robot, &cfg).unwrap(), 2.0 * expect, max_relative = 1e-12);
    }

    #[test]
    fn empty_scene_straight_line_is_stationary() {
        let scene = AnalyticScene::empty(Aabb::cube(3.0));
        let robot = Robot::quadrotor();
        let body = robot.body_model();
        let cfg = PlannerConfig {
            iterations: 200,
            ..PlannerConfig::default()
        };
        let prob = Problem::new(&scene, &robot, &body, &cfg);
        let mut init = FlatTrajectory::straight_line(Vector3::new(-1.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0), 0.0, 20, 0.1);
        let speed = 2.0 / 2.0;
        init.start_velocity = Vector3::new(speed, 0.0, 0.0);
        init.end_velocity = init.start_velocity;
        let res = prob.optimize(&init, cfg.iterations).unwrap();
        for (a, b) in res.trajectory.waypoints.iter().zip(&init.waypoints) {
            assert!((a.position - b.position).norm() < 1e-3);
        }
    }

    #[test]
    fn optimization_reduces_collision() {
        let scene = block_scene();
        let robot = Robot::quadrotor();
        let body = robot.body_model();
        let cfg = PlannerConfig {
            iterations: 600,
            ..PlannerConfig::default()
        };
        let prob = Problem::new(&scene, &robot, &body, &cfg);
        let init = FlatTrajectory::straight_line(Vector3::new(-1.5, 0.05, 1.0), Vector3::new(1.5, 0.05, 1.0), 0.0, 20, 0.1);
        let res = prob.optimize(&init, cfg.iterations).unwrap();
        let first = res.trace[0].collision;
        let last = res.final_cost().unwrap().collision;
        assert!(last < 0.1 * first, "{first} -> {last}");
        assert_eq!(res.iterations, 600);
    }

    #[test]
    fn astar_straight_in_empty_scene() {
        let scene = AnalyticScene::empty(Aabb::cube(2.0));
        let cfg = PlannerConfig::default();
        let (a, b) = (Vector3::new(-1.5, -1.0, -0.5), Vector3::new(1.4, 0.7, 0.9));
        let path = astar_path(&scene, &a, &b, &cfg, false).unwrap();
        assert!(!path.fallback);
        assert_eq!(path.points.len(), cfg.horizon + 1);
        let dir = (b - a).normalize();
        for p in &path.points {
            let off = (p - a) - dir * (p - a).dot(&dir);
            assert!(off.norm() <= cfg.grid_resolution * 3f64.sqrt());
        }
    }

    #[test]
    fn astar_goes_around_wall_and_rejects_occupied_start() {
        let scene = AnalyticScene::empty(Aabb::new(Vector3::new(-2.0, -2.0, 0.0), Vector3::new(2.0, 2.0, 1.0)))
            .with_primitive(
                Primitive::cuboid(Pose::from_translation(Vector3::new(0.0, -0.5, 0.5)), [0.1, 1.5, 1.0], 50.0, [1.0; 3])
                    .with_softness(0.01),
            );
        let cfg = PlannerConfig::default();
        let (a, b) = (Vector3::new(-1.0, 0.0, 0.5), Vector3::new(1.0, 0.0, 0.5));
        let path = astar_path(&scene, &a, &b, &cfg, true).unwrap();
        assert!(path.polyline.iter().any(|p| p.y > 1.0));
        assert!(path.polyline.iter().all(|p| p.z == 0.5));
        let err = astar_path(&scene, &Vector3::new(0.0, 0.0, 0.5), &b, &cfg, true).unwrap_err();
        assert!(matches!(err, PlanError::StartOrGoalOccupied { which: "start", .. }));
    }

    #[test]
    fn astar_falls_back_when_sealed() {
        let scene = AnalyticScene::empty(Aabb::new(Vector3::new(-2.0, -2.0, 0.0), Vector3::new(2.0, 2.0, 1.0)))
            .with_primitive(
                Primitive::cuboid(Pose::from_translation(Vector3::new(0.0, 0.0, 0.5)), [0.1, 3.0, 1.0], 50.0, [1.0; 3])
                    .with_softness(0.01),
            );
        let cfg = PlannerConfig::default();
        let path = astar_path(&scene, &Vector3::new(-1.0, 0.0, 0.5), &Vector3::new(1.0, 0.0, 0.5), &cfg, false).unwrap();
        assert!(path.fallback);
        assert_relative_eq!(path.points[cfg.horizon / 2], Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn resample_is_uniform() {
        let poly = [Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(1.0, 3.0, 0.0)];
        let pts = resample(&poly, 8);
        for w in pts.windows(2) {
            let d = (w[1] - w[0]).norm();
            assert!(d <= 0.5 + 1e-12);
        }
        assert_relative_eq!(pts[2], Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn yaw_faces_travel() {
        let pts = resample(&[Vector3::zeros(), Vector3::new(0.0, 2.0, 0.0)], 6);
        let traj = initial_trajectory(&pts, 0.0, std::f64::consts::FRAC_PI_2, 6, 0.1, YawInit::FaceTravel);
        assert_relative_eq!(traj.waypoints[3].yaw, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_eq!(traj.waypoints[0].yaw, 0.0);
    }

    #[test]
    fn warm_start_shrinks_and_pins() {
        let traj = FlatTrajectory::straight_line(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), 0.0, 6, 0.1);
        let s = FullState::at_rest(Pose::from_translation(Vector3::new(0.2, 0.01, 0.0)));
        let w = warm_start(&traj, &s);
        assert_eq!(w.horizon(), 5);
        assert_eq!(w.waypoints[0].position, s.position());
        let w = warm_start(&warm_start(&w, &s), &s);
        assert_eq!(w.horizon(), 4);
    }
}

//! Reference planners: minimum-snap polynomials through A* waypoints and a
//! goal-biased RRT under a spherical collision model, plus a batch harness
//! that scores them against the optimizer.

use crate::dynamics::{derive_states, FlatTrajectory, FlatWaypoint, FullState, Robot};
use crate::exec::ExecPolicy;
use crate::field::{AnalyticScene, OccupancyOracle, RadianceField};
use crate::geom::Pose;
use crate::planner::{astar_path, intersection_count, resample, PlanError, PlannerConfig, Problem};
use crate::seed::{derive_seed, rng_from, substream, TAG_RRT};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const REPORT_FORMAT_VERSION: u32 = 1;
const DEGREE: usize = 7;
const NCOEF: usize = DEGREE + 1;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("minimum-snap system is singular (check segment times)")]
    SingularSystem,
    #[error("need at least two waypoints and one positive time per segment")]
    BadInput,
    #[error("RRT found no path within {0} iterations")]
    Timeout(usize),
    #[error("{0} is in collision under the spherical model")]
    EndpointBlocked(&'static str),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Degree-7 polynomial per flat output over `[0, duration]`, coefficients in
/// ascending powers of local time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySegment {
    /// x, y, z, yaw.
    pub coeffs: [[f64; NCOEF]; 4],
    pub duration: f64,
}

fn falling(i: usize, k: usize) -> f64 {
    (0..k).map(|j| (i - j) as f64).product()
}

/// `k`-th derivative of `t^i`, as (coefficient, power); zero when `k > i`.
fn basis(i: usize, k: usize, t: f64) -> f64 {
    if k > i {
        0.0
    } else {
        falling(i, k) * t.powi((i - k) as i32)
    }
}

impl PolySegment {
    /// `k`-th time derivative of every axis at local time `t`.
    pub fn eval(&self, t: f64, k: usize) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (a, c) in self.coeffs.iter().enumerate() {
            out[a] = (0..NCOEF).map(|i| c[i] * basis(i, k, t)).sum();
        }
        out
    }

    /// `∫‖snap‖²` over the three position axes, by Gauss-Legendre quadrature.
    pub fn snap_cost(&self) -> f64 {
        // 8-point rule is exact for the degree-6 integrand.
        const X: [f64; 4] = [0.183_434_642_495_649_8, 0.525_532_409_916_329, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
        const W: [f64; 4] = [0.362_683_783_378_362, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];
        let half = 0.5 * self.duration;
        let mut total = 0.0;
        for (x, w) in X.iter().zip(W) {
            for sgn in [-1.0, 1.0] {
                let s = self.eval(half * (1.0 + sgn * x), 4);
                total += w * half * (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]);
            }
        }
        total
    }
}

/// Segment durations proportional to waypoint spacing, summing to `total`.
pub fn allocate_times(waypoints: &[FlatWaypoint], total: f64) -> Vec<f64> {
    let d: Vec<f64> = waypoints
        .windows(2)
        .map(|w| (w[1].position - w[0].position).norm().max(1e-6))
        .collect();
    let sum: f64 = d.iter().sum();
    d.iter().map(|x| total * x / sum).collect()
}

/// Minimum-snap interpolation with rest-to-rest boundary conditions
/// (velocity, acceleration and jerk zero at both ends) and continuity
/// through jerk at interior waypoints; each axis is solved independently.
pub fn min_snap(waypoints: &[FlatWaypoint], times: &[f64]) -> Result<Vec<PolySegment>, BaselineError> {
    let n = times.len();
    if waypoints.len() < 2 || n != waypoints.len() - 1 || times.iter().any(|t| !(*t > 0.0)) {
        return Err(BaselineError::BadInput);
    }
    let nv = NCOEF * n;
    // Snap Hessian, block diagonal.
    let mut q = DMatrix::zeros(nv, nv);
    for (s, &t) in times.iter().enumerate() {
        for i in 4..NCOEF {
            for j in 4..NCOEF {
                let p = (i + j - 7) as i32;
                q[(s * NCOEF + i, s * NCOEF + j)] = falling(i, 4) * falling(j, 4) * t.powi(p) / p as f64;
            }
        }
    }
    let nc = 2 * n + 3 * (n - 1) + 6;
    let mut a = DMatrix::zeros(nc, nv);
    let mut row = 0;
    let mut rhs_rows: Vec<(usize, Option<usize>)> = Vec::with_capacity(nc);
    for (s, &t) in times.iter().enumerate() {
        for i in 0..NCOEF {
            a[(row, s * NCOEF + i)] = basis(i, 0, 0.0);
            a[(row + 1, s * NCOEF + i)] = basis(i, 0, t);
        }
        rhs_rows.push((row, Some(s)));
        rhs_rows.push((row + 1, Some(s + 1)));
        row += 2;
        if s + 1 < n {
            for k in 1..4 {
                for i in 0..NCOEF {
                    a[(row, s * NCOEF + i)] = basis(i, k, t);
                    a[(row, (s + 1) * NCOEF + i)] = -basis(i, k, 0.0);
                }
                rhs_rows.push((row, None));
                row += 1;
            }
        }
    }
    for k in 1..4 {
        for i in 0..NCOEF {
            a[(row, i)] = basis(i, k, 0.0);
            a[(row + 1, (n - 1) * NCOEF + i)] = basis(i, k, times[n - 1]);
        }
        rhs_rows.push((row, None));
        rhs_rows.push((row + 1, None));
        row += 2;
    }
    debug_assert_eq!(row, nc);
    let mut kkt = DMatrix::zeros(nv + nc, nv + nc);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&q);
    kkt.view_mut((0, nv), (nv, nc)).copy_from(&a.transpose());
    kkt.view_mut((nv, 0), (nc, nv)).copy_from(&a);
    let lu = kkt.lu();
    let mut segs: Vec<PolySegment> = times
        .iter()
        .map(|&duration| PolySegment {
            coeffs: [[0.0; NCOEF]; 4],
            duration,
        })
        .collect();
    let yaw = crate::dynamics::unwrap_yaw(&waypoints.iter().map(|w| w.yaw).collect::<Vec<_>>());
    for axis in 0..4 {
        let mut rhs = DVector::zeros(nv + nc);
        for &(r, wp) in &rhs_rows {
            if let Some(k) = wp {
                rhs[nv + r] = if axis < 3 { waypoints[k].position[axis] } else { yaw[k] };
            }
        }
        let sol = lu.solve(&rhs).ok_or(BaselineError::SingularSystem)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(BaselineError::SingularSystem);
        }
        for (s, seg) in segs.iter_mut().enumerate() {
            for i in 0..NCOEF {
                seg.coeffs[axis][i] = sol[s * NCOEF + i];
            }
        }
    }
    Ok(segs)
}

/// Evaluate a piecewise polynomial at global time `t` (clamped to its span).
pub fn eval_piecewise(segs: &[PolySegment], t: f64, k: usize) -> [f64; 4] {
    let mut t = t.max(0.0);
    for (i, s) in segs.iter().enumerate() {
        if t <= s.duration || i + 1 == segs.len() {
            return s.eval(t.min(s.duration), k);
        }
        t -= s.duration;
    }
    [0.0; 4]
}

/// Flat trajectory sampled every `dt` over `horizon` steps.
pub fn sample_polynomial(segs: &[PolySegment], horizon: usize, dt: f64) -> FlatTrajectory {
    let total: f64 = segs.iter().map(|s| s.duration).sum();
    let wps = (0..=horizon)
        .map(|k| {
            let v = eval_piecewise(segs, total * k as f64 / horizon as f64, 0);
            FlatWaypoint::new(Vector3::new(v[0], v[1], v[2]), v[3])
        })
        .collect();
    FlatTrajectory::new(wps, dt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrtConfig {
    pub step: f64,
    pub goal_bias: f64,
    pub max_iterations: usize,
    /// Points on each collision-check shell.
    pub shell_points: usize,
}

impl Default for RrtConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            goal_bias: 0.1,
            max_iterations: 50_000,
            shell_points: 128,
        }
    }
}

/// Tree built by [`rrt_plan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrtTree {
    pub nodes: Vec<Vector3<f64>>,
    /// `parent[0]` is the root and points to itself.
    pub parent: Vec<usize>,
    pub step: f64,
    pub goal_bias: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrtResult {
    pub path: Vec<Vector3<f64>>,
    pub raw_path: Vec<Vector3<f64>>,
    pub tree: RrtTree,
    pub iterations: usize,
}

/// Unit vectors spread over the sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            Vector3::new(r * a.cos(), r * a.sin(), z)
        })
        .collect()
}

/// Spherical collision model: the center and two shells (radius and half
/// radius) must all be at or below the density threshold.
pub struct SphereChecker<'a, F: ?Sized> {
    field: &'a F,
    threshold: f64,
    radius: f64,
    offsets: Vec<Vector3<f64>>,
}

impl<'a, F: RadianceField + ?Sized> SphereChecker<'a, F> {
    pub fn new(field: &'a F, threshold: f64, radius: f64, shell_points: usize) -> Self {
        let dirs = fibonacci_sphere(shell_points);
        let mut offsets = vec![Vector3::zeros()];
        for r in [radius, 0.5 * radius] {
            offsets.extend(dirs.iter().map(|d| d * r));
        }
        Self {
            field,
            threshold,
            radius,
            offsets,
        }
    }

    pub fn point_free(&self, c: &Vector3<f64>) -> bool {
        let b = self.field.bounds();
        b.contains(c) && self.offsets.iter().all(|o| self.field.density(&(c + o)) <= self.threshold)
    }

    /// Sphere centers every half radius along the segment.
    pub fn edge_free(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let spacing = (0.5 * self.radius).max(1e-3);
        let n = (((b - a).norm() / spacing).ceil() as usize).max(1);
        (0..=n).all(|k| self.point_free(&(a + (b - a) * (k as f64 / n as f64))))
    }
}

/// Goal-biased RRT from `start` to `goal` with greedy shortcutting.
pub fn rrt_plan<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    start: &Vector3<f64>,
    goal: &Vector3<f64>,
    threshold: f64,
    radius: f64,
    rng: &mut R,
    config: &RrtConfig,
) -> Result<RrtResult, BaselineError> {
    let check = SphereChecker::new(field, threshold, radius, config.shell_points);
    if !check.point_free(start) {
        return Err(BaselineError::EndpointBlocked("start"));
    }
    if !check.point_free(goal) {
        return Err(BaselineError::EndpointBlocked("goal"));
    }
    let bounds = field.bounds();
    let mut tree = RrtTree {
        nodes: vec![*start],
        parent: vec![0],
        step: config.step,
        goal_bias: config.goal_bias,
        radius,
    };
    let finish = |tree: RrtTree, leaf: usize, iterations: usize| {
        let mut raw = vec![*goal];
        let mut k = leaf;
        loop {
            raw.push(tree.nodes[k]);
            if k == 0 {
                break;
            }
            k = tree.parent[k];
        }
        raw.reverse();
        raw.dedup();
        let path = shortcut(&check, &raw);
        RrtResult {
            path,
            raw_path: raw,
            tree,
            iterations,
        }
    };
    if check.edge_free(start, goal) {
        return Ok(finish(tree, 0, 0));
    }
    for it in 0..config.max_iterations {
        let sample = if rng.random::<f64>() < config.goal_bias {
            *goal
        } else {
            Vector3::from_fn(|i, _| rng.random_range(bounds.min[i]..=bounds.max[i]))
        };
        let (near, dist) = tree
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, (n - sample).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("tree has a root");
        if dist == 0.0 {
            continue;
        }
        let from = tree.nodes[near];
        let dir = sample - from;
        let new = if dir.norm() <= config.step {
            sample
        } else {
            from + dir.normalize() * config.step
        };
        if !check.edge_free(&from, &new) {
            continue;
        }
        tree.nodes.push(new);
        tree.parent.push(near);
        let leaf = tree.nodes.len() - 1;
        if (goal - new).norm() <= config.step && check.edge_free(&new, goal) {
            return Ok(finish(tree, leaf, it + 1));
        }
    }
    Err(BaselineError::Timeout(config.max_iterations))
}

fn shortcut<F: RadianceField + ?Sized>(check: &SphereChecker<F>, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i + 1 < pts.len() {
        let mut j = pts.len() - 1;
        while j > i + 1 && !check.edge_free(&pts[i], &pts[j]) {
            j -= 1;
        }
        out.push(pts[j]);
        i = j;
    }
    out
}

pub fn path_length(path: &[Vector3<f64>]) -> f64 {
    path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Flat trajectory that visits a polyline at constant speed over `horizon`
/// steps with the yaw facing the start-goal direction.
pub fn track_path(path: &[Vector3<f64>], horizon: usize, dt: f64, yaw: f64) -> FlatTrajectory {
    let pts = resample(path, horizon);
    FlatTrajectory::new(pts.into_iter().map(|p| FlatWaypoint::new(p, yaw)).collect(), dt)
}

/// One planning query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub start: Vector3<f64>,
    pub goal: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Proposed,
    MinSnap,
    Rrt,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 3] = [PlannerKind::Proposed, PlannerKind::MinSnap, PlannerKind::Rrt];

    pub fn name(&self) -> &'static str {
        match self {
            PlannerKind::Proposed => "proposed",
            PlannerKind::MinSnap => "min_snap",
            PlannerKind::Rrt => "rrt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub planner: PlannerKind,
    pub collision_cost: f64,
    /// Control cost divided by the number of steps.
    pub control_cost: f64,
    /// Some body point is inside an obstacle at some timestep, or the
    /// planner produced nothing.
    pub failure: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<FlatTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub format_version: u32,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn failure_rate(&self, planner: PlannerKind) -> f64 {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.planner == planner).collect();
        rows.iter().filter(|r| r.failure).count() as f64 / rows.len().max(1) as f64
    }

    /// Mean over rows that produced a trajectory.
    pub fn mean_control(&self, planner: PlannerKind) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.planner == planner && r.error.is_none())
            .map(|r| r.control_cost)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_collision(&self, planner: PlannerKind) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.planner == planner && r.error.is_none())
            .map(|r| r.collision_cost)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario,planner,collision_cost,control_cost,failure\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.scenario,
                r.planner.name(),
                r.collision_cost,
                r.control_cost,
                r.failure
            ));
        }
        s
    }

    pub fn write(&self, csv: impl AsRef<Path>, json: impl AsRef<Path>) -> Result<(), BaselineError> {
        std::fs::File::create(csv)?.write_all(self.to_csv().as_bytes())?;
        std::fs::write(json, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Settings shared by every planner in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub planner: PlannerConfig,
    pub rrt: RrtConfig,
    /// RRT density threshold; `None` uses half the scene's peak density.
    pub rrt_threshold: Option<f64>,
    pub seed: u64,
    pub keep_trajectories: bool,
    pub policy: ExecPolicy,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            planner: PlannerConfig::default(),
            rrt: RrtConfig::default(),
            rrt_threshold: None,
            seed: 0,
            keep_trajectories: true,
            policy: ExecPolicy::Sequential,
        }
    }
}

/// Run the optimizer, min-snap and RRT on every scenario. Scenario errors
/// become failed rows; the batch never aborts.
pub fn compare_planners(scene: &AnalyticScene, robot: &Robot, scenarios: &[Scenario], cfg: &ComparisonConfig) -> ComparisonReport {
    let body = robot.body_model();
    let rrt_seed = derive_seed(cfg.seed, TAG_RRT);
    let threshold = cfg.rrt_threshold.unwrap_or(0.5 * scene.max_density());
    let per_scenario = cfg.policy.map(scenarios.len(), |k| {
        let sc = &scenarios[k];
        PlannerKind::ALL
            .iter()
            .map(|&kind| {
                let mut rng = rng_from(substream(rrt_seed, k as u64));
                let traj = run_one(kind, scene, robot, sc, cfg, threshold, &mut rng);
                score(kind, sc, traj, scene, robot, &body, cfg)
            })
            .collect::<Vec<_>>()
    });
    ComparisonReport {
        format_version: REPORT_FORMAT_VERSION,
        rows: per_scenario.into_iter().flatten().collect(),
    }
}

fn run_one<R: Rng>(
    kind: PlannerKind,
    scene: &AnalyticScene,
    robot: &Robot,
    sc: &Scenario,
    cfg: &ComparisonConfig,
    threshold: f64,
    rng: &mut R,
) -> Result<FlatTrajectory, BaselineError> {
    let h = cfg.planner.horizon;
    let d = sc.goal - sc.start;
    let yaw = d.y.atan2(d.x);
    match kind {
        PlannerKind::Proposed => {
            let body = robot.body_model();
            let pcfg = PlannerConfig {
                policy: cfg.policy,
                ..cfg.planner.clone()
            };
            let start = FullState::at_rest(Pose::from_yaw(yaw, sc.start));
            let prob = Problem::new(scene, robot, &body, &pcfg);
            match prob.plan(&start, &FlatWaypoint::new(sc.goal, yaw)) {
                Ok(r) => Ok(r.trajectory),
                Err(PlanError::NonFiniteCost { best, .. }) => Ok(best.trajectory),
                Err(e) => Err(e.into()),
            }
        }
        PlannerKind::MinSnap => {
            let path = astar_path(scene, &sc.start, &sc.goal, &cfg.planner, false)?;
            let wps: Vec<FlatWaypoint> = path.polyline.iter().map(|p| FlatWaypoint::new(*p, yaw)).collect();
            let times = allocate_times(&wps, h as f64 * robot.dt);
            let segs = min_snap(&wps, &times)?;
            Ok(sample_polynomial(&segs, h, robot.dt))
        }
        PlannerKind::Rrt => {
            let res = rrt_plan(scene, &sc.start, &sc.goal, threshold, robot.body_model().radius(), rng, &cfg.rrt)?;
            Ok(track_path(&res.path, h, robot.dt, yaw))
        }
    }
}

fn score(
    kind: PlannerKind,
    sc: &Scenario,
    traj: Result<FlatTrajectory, BaselineError>,
    scene: &AnalyticScene,
    robot: &Robot,
    body: &crate::dynamics::BodyModel,
    cfg: &ComparisonConfig,
) -> ComparisonRow {
    let failed = |e: String| ComparisonRow {
        scenario: sc.name.clone(),
        planner: kind,
        collision_cost: f64::NAN,
        control_cost: f64::NAN,
        failure: true,
        error: Some(e),
        trajectory: None,
    };
    let traj = match traj {
        Ok(t) => t,
        Err(e) => return failed(e.to_string()),
    };
    let pcfg = PlannerConfig {
        policy: ExecPolicy::Sequential,
        ..cfg.planner.clone()
    };
    let prob = Problem::new(scene, robot, body, &pcfg);
    let cost = match prob.cost(&traj) {
        Ok(c) => c,
        Err(e) => return failed(e.to_string()),
    };
    let states = match derive_states(&traj, robot) {
        Ok(s) => s.into_iter().map(|x| x.0).collect::<Vec<_>>(),
        Err(e) => return failed(e.to_string()),
    };
    let hits = intersection_count(&states, scene as &dyn OccupancyOracle, body);
    ComparisonRow {
        scenario: sc.name.clone(),
        planner: kind,
        collision_cost: cost.collision,
        control_cost: cost.control / traj.horizon() as f64,
        failure: hits > 0,
        error: None,
        trajectory: cfg.keep_trajectories.then_some(traj),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Aabb, Primitive};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wp(x: f64, y: f64, z: f64) -> FlatWaypoint {
        FlatWaypoint::new(Vector3::new(x, y, z), 0.0)
    }

    #[test]
    fn two_waypoints_match_closed_form() {
        let (d, t) = (2.0, 1.5);
        let segs = min_snap(&[wp(0.0, 0.0, 0.0), wp(d, 0.0, 0.0)], &[t]).unwrap();
        for k in 0..=20 {
            let s = k as f64 / 20.0;
            let expect = d * (35.0 * s.powi(4) - 84.0 * s.powi(5) + 70.0 * s.powi(6) - 20.0 * s.powi(7));
            assert!((segs[0].eval(s * t, 0)[0] - expect).abs() < 1e-6);
        }
        assert_relative_eq!(segs[0].snap_cost(), 100800.0 * d * d / t.powi(7), max_relative = 1e-8);
    }

    #[test]
    fn interpolates_and_is_smooth() {
        let wps = [wp(0.0, 0.0, 1.0), wp(1.0, 0.5, 1.2), wp(1.5, 1.5, 0.8), wp(2.5, 1.0, 1.0)];
        let times = allocate_times(&wps, 4.0);
        let segs = min_snap(&wps, &times).unwrap();
        for (i, s) in segs.iter().enumerate() {
            let a = s.eval(0.0, 0);
            let b = s.eval(s.duration, 0);
            for ax in 0..3 {
                assert!((a[ax] - wps[i].position[ax]).abs() < 1e-8);
                assert!((b[ax] - wps[i + 1].position[ax]).abs() < 1e-8);
            }
        }
        for w in segs.windows(2) {
            for k in 1..4 {
                let l = w[0].eval(w[0].duration, k);
                let r = w[1].eval(0.0, k);
                for ax in 0..3 {
                    assert!((l[ax] - r[ax]).abs() < 1e-8, "deriv {k}");
                }
            }
        }
        for k in 1..3 {
            assert!(segs[0].eval(0.0, k).iter().all(|v| v.abs() < 1e-8));
        }
    }

    #[test]
    fn collinear_waypoints_stay_on_line() {
        let wps = [wp(0.0, 0.0, 0.0), wp(1.0, 1.0, 0.0), wp(2.0, 2.0, 0.0)];
        let segs = min_snap(&wps, &[1.0, 1.0]).unwrap();
        for k in 0..=40 {
            let v = eval_piecewise(&segs, k as f64 * 0.05, 0);
            assert!((v[0] - v[1]).abs() < 1e-9 && v[2].abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_times_rejected() {
        assert!(matches!(min_snap(&[wp(0.0, 0.0, 0.0), wp(1.0, 0.0, 0.0)], &[0.0]), Err(BaselineError::BadInput)));
    }

    fn wall(gap: f64) -> AnalyticScene {
        let half = 0.5 * (4.0 - gap) * 0.5;
        let mut s = AnalyticScene::empty(Aabb::new(Vector3::new(-2.0, -2.0, 0.0), Vector3::new(2.0, 2.0, 1.0)));
        for sign in [-1.0, 1.0] {
            let cy = sign * (0.5 * gap + half);
            s = s.with_primitive(
                Primitive::cuboid(Pose::from_translation(Vector3::new(0.0, cy, 0.5)), [0.1, half, 1.0], 50.0, [1.0; 3])
                    .with_softness(0.005),
            );
        }
        s
    }

    #[test]
    fn rrt_empty_scene_is_straight() {
        let s = AnalyticScene::empty(Aabb::cube(2.0));
        let (a, b) = (Vector3::new(-1.5, -1.0, 0.0), Vector3::new(1.5, 1.0, 0.5));
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rrt_plan(&s, &a, &b, 25.0, 0.1, &mut rng, &RrtConfig::default()).unwrap();
            assert!(path_length(&r.path) <= 1.05 * (b - a).norm());
        }
    }

    #[test]
    fn rrt_through_gap_and_times_out_when_narrow() {
        let s = wall(0.5);
        let (a, b) = (Vector3::new(-1.0, 0.8, 0.5), Vector3::new(1.0, -0.8, 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = rrt_plan(&s, &a, &b, 25.0, 0.1, &mut rng, &RrtConfig::default()).unwrap();
        for (i, n) in r.tree.nodes.iter().enumerate() {
            assert!(s.signed_distance(n) > 0.1, "node {i}");
        }
        let crossing = r.path.windows(2).find(|w| w[0].x < 0.0 && w[1].x >= 0.0).unwrap();
        let t = -crossing[0].x / (crossing[1].x - crossing[0].x);
        assert!((crossing[0].y + t * (crossing[1].y - crossing[0].y)).abs() < 0.25);
        let narrow = wall(0.15);
        let cfg = RrtConfig {
            max_iterations: 3000,
            ..RrtConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(rrt_plan(&narrow, &a, &b, 25.0, 0.1, &mut rng, &cfg), Err(BaselineError::Timeout(3000))));
    }

    #[test]
    fn rrt_edges_clear_the_oracle_in_stone_ring() {
        let setup = crate::scenes::pillar_field();
        let radius = setup.robot.body_model().radius();
        let threshold = 0.5 * setup.scene.max_density();
        for (k, sc) in crate::scenes::pillar_scenarios(4, 1).iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let r = rrt_plan(&setup.scene, &sc.start, &sc.goal, threshold, radius, &mut rng, &RrtConfig::default()).unwrap();
            for w in r.path.windows(2) {
                for i in 0..=50 {
                    let p = w[0] + (w[1] - w[0]) * (i as f64 / 50.0);
                    assert!(setup.scene.signed_distance(&p) > 0.9 * radius, "{}: {p:?} sd {} r {radius} rho {}", sc.name, setup.scene.signed_distance(&p), setup.scene.density(&p));
                }
            }
        }
    }

    #[test]
    fn empty_batch_has_no_failures() {
        let scene = AnalyticScene::empty(Aabb::new(Vector3::new(-2.0, -2.0, 0.0), Vector3::new(2.0, 2.0, 2.0)));
        let robot = Robot::quadrotor();
        let scenarios = vec![
            Scenario {
                name: "a".into(),
                start: Vector3::new(-1.0, 0.0, 1.0),
                goal: Vector3::new(1.0, 0.3, 1.0),
            },
            Scenario {
                name: "b".into(),
                start: Vector3::new(0.0, -1.0, 0.5),
                goal: Vector3::new(0.2, 1.0, 1.5),
            },
        ];
        let cfg = ComparisonConfig {
            planner: PlannerConfig {
                iterations: 50,
                ..PlannerConfig::default()
            },
            rrt_threshold: Some(1.0),
            ..ComparisonConfig::default()
        };
        let rep = compare_planners(&scene, &robot, &scenarios, &cfg);
        assert_eq!(rep.rows.len(), 6);
        assert!(rep.rows.iter().all(|r| !r.failure), "{:?}", rep.rows);
        assert_eq!(rep.to_csv().lines().count(), 7);
    }
}

//! Monte-Carlo harnesses behind the evaluation plots: filter against the
//! photometric-only baseline, collision cost against ground-truth
//! intersection, and closed- against open-loop navigation.

use crate::dynamics::{derive_states, simulate_step, Control, NoiseSpec};
use crate::estimator::{filter_step, propagate, state_errors, Belief, FilterConfig};
use crate::exec::ExecPolicy;
use crate::planner::{initial_trajectory, intersection_volume, PlanError, PlannerConfig, Problem};
use crate::render::{render_image, RenderOptions};
use crate::scenes::Setup;
use crate::seed::{derive_seed, rng_from, substream, TAG_PIXEL_SELECT, TAG_RENDER_JITTER, TAG_SIM_NOISE};
use crate::sim::{run_episode, Mode, RunConfig, SimError};
use serde::{Deserialize, Serialize};

/// Spearman rank correlation with average ranks for ties. `None` when
/// either sample is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        return None;
    }
    Some(num / (da * db).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Per-timestep mean and standard deviation of (translation, rotation,
/// velocity) errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurves {
    pub mean: Vec<[f64; 3]>,
    pub std: Vec<[f64; 3]>,
}

impl ErrorCurves {
    fn from_samples(samples: &[Vec<[f64; 3]>]) -> Self {
        let steps = samples.first().map_or(0, Vec::len);
        let n = samples.len() as f64;
        let mut mean = vec![[0.0; 3]; steps];
        let mut std = vec![[0.0; 3]; steps];
        for t in 0..steps {
            for c in 0..3 {
                let m = samples.iter().map(|s| s[t][c]).sum::<f64>() / n;
                let var = samples.iter().map(|s| (s[t][c] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                mean[t][c] = m;
                std[t][c] = var.sqrt();
            }
        }
        Self { mean, std }
    }

    /// Mean over the horizon of each error component.
    pub fn horizon_mean(&self) -> [f64; 3] {
        let n = self.mean.len().max(1) as f64;
        let mut out = [0.0; 3];
        for row in &self.mean {
            for c in 0..3 {
                out[c] += row[c] / n;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterTrialConfig {
    pub trials: usize,
    pub seed: u64,
    pub filter: FilterConfig,
    /// True process noise.
    pub noise: NoiseSpec,
    /// Σ₀ = `initial_variance`·I, centred on the true start.
    pub initial_variance: f64,
    /// Render measurements with stratified sample jitter, while the filter
    /// predicts with bin midpoints.
    pub measurement_jitter: bool,
    pub policy: ExecPolicy,
}

impl Default for FilterTrialConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            filter: FilterConfig {
                policy: ExecPolicy::Sequential,
                ..FilterConfig::default()
            },
            noise: NoiseSpec::default(),
            initial_variance: 0.1,
            measurement_jitter: true,
            policy: ExecPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterComparison {
    pub full: ErrorCurves,
    pub baseline: ErrorCurves,
    /// Updates that failed and fell back to the prediction.
    pub full_failures: usize,
    pub baseline_failures: usize,
}

/// Run the full filter and the photometric-only baseline side by side on the
/// same noisy rollouts, images and pixel draws. Trial `k` uses master seed
/// `cfg.seed + k`.
pub fn filter_monte_carlo(setup: &Setup, controls: &[Control], cfg: &FilterTrialConfig) -> FilterComparison {
    let baseline_cfg = cfg.filter.baseline();
    let mut robot = setup.robot.clone();
    robot.noise = cfg.noise;
    let trial = |k: usize| {
        let master = cfg.seed.wrapping_add(k as u64);
        let mut rng = rng_from(derive_seed(master, TAG_SIM_NOISE));
        let pixel_seed = derive_seed(master, TAG_PIXEL_SELECT);
        let jitter_seed = derive_seed(master, TAG_RENDER_JITTER);
        let mut truth = setup.start;
        let mut full = Belief::isotropic(setup.start, cfg.initial_variance);
        let mut base = full;
        let mut errs = (Vec::with_capacity(controls.len()), Vec::with_capacity(controls.len()));
        let mut failures = (0, 0);
        for (t, u) in controls.iter().enumerate() {
            truth = simulate_step(&truth, u, &robot, &robot.noise, &mut rng);
            let opts = RenderOptions {
                jitter_seed: cfg.measurement_jitter.then(|| substream(jitter_seed, t as u64)),
                ..cfg.filter.render
            };
            let cam = truth.pose * cfg.filter.camera_mount;
            let image = render_image(&setup.scene, &cfg.filter.camera, &cam, &opts, None, ExecPolicy::Sequential);
            let pix = substream(pixel_seed, t as u64);
            let advance = |b: &Belief, fc: &FilterConfig, fails: &mut usize| {
                let stepped = image
                    .as_ref()
                    .ok()
                    .and_then(|img| filter_step(b, u, img, &setup.scene, &robot, fc, pix, t).ok());
                match stepped {
                    Some(r) => r.posterior,
                    None => {
                        *fails += 1;
                        propagate(b, u, &robot, &fc.q())
                    }
                }
            };
            full = advance(&full, &cfg.filter, &mut failures.0);
            base = advance(&base, &baseline_cfg, &mut failures.1);
            let e = |b: &Belief| {
                let (p, r, v) = state_errors(&b.mean, &truth);
                [p, r, v]
            };
            errs.0.push(e(&full));
            errs.1.push(e(&base));
        }
        (errs, failures)
    };
    let results = cfg.policy.map(cfg.trials, trial);
    let full: Vec<_> = results.iter().map(|r| r.0 .0.clone()).collect();
    let base: Vec<_> = results.iter().map(|r| r.0 .1.clone()).collect();
    FilterComparison {
        full: ErrorCurves::from_samples(&full),
        baseline: ErrorCurves::from_samples(&base),
        full_failures: results.iter().map(|r| r.1 .0).sum(),
        baseline_failures: results.iter().map(|r| r.1 .1).sum(),
    }
}

/// Collision cost and ground-truth intersection volume at sampled
/// optimizer iterates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTrace {
    pub iteration: Vec<usize>,
    pub collision_cost: Vec<f64>,
    pub intersection_volume: Vec<f64>,
}

impl CorrelationTrace {
    pub fn spearman(&self) -> Option<f64> {
        spearman(&self.collision_cost, &self.intersection_volume)
    }
}

/// Iterations `round(ratio^k) - 1` below `iterations`, deduplicated: dense
/// early, sparse late, so every phase of a run carries similar weight.
pub fn geometric_schedule(iterations: usize, ratio: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut x = 1.0f64;
    loop {
        let i = x.round() as usize - 1;
        if i >= iterations {
            break;
        }
        if out.last() != Some(&i) {
            out.push(i);
        }
        x *= ratio;
    }
    out
}

/// Optimize from the straight start-goal line (which cuts the obstacle) and
/// record the iterates listed in the ascending `schedule`.
pub fn collision_trace(setup: &Setup, config: &PlannerConfig, schedule: &[usize]) -> Result<CorrelationTrace, PlanError> {
    let body = setup.robot.body_model();
    let problem = Problem::new(&setup.scene, &setup.robot, &body, config);
    let init = initial_trajectory(
        &[setup.start.position(), setup.goal.position],
        setup.start.yaw(),
        setup.goal.yaw,
        config.horizon,
        setup.robot.dt,
        config.yaw_init,
    )
    .pinned_to(&setup.start);
    let mut trace = CorrelationTrace::default();
    let mut err = None;
    let iterations = schedule.iter().max().map_or(0, |m| m + 1);
    let outcome = problem.optimize_observed(&init, iterations, |it, traj, terms| {
        if err.is_some() || schedule.binary_search(&it).is_err() {
            return;
        }
        match derive_states(traj, &setup.robot) {
            Ok(derived) => {
                let states: Vec<_> = derived.into_iter().map(|(s, _)| s).collect();
                trace.iteration.push(it);
                trace.collision_cost.push(terms.collision);
                trace.intersection_volume.push(intersection_volume(&states, &setup.scene, &body));
            }
            Err(e) => err = Some(e),
        }
    });
    match outcome {
        Ok(_) | Err(PlanError::NonFiniteCost { .. }) => {}
        Err(e) => return Err(e),
    }
    match err {
        Some(e) => Err(e.into()),
        None => Ok(trace),
    }
}

/// Reach-without-collision outcome of each seed in both modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopComparison {
    pub seeds: Vec<u64>,
    pub closed: Vec<bool>,
    pub open: Vec<bool>,
}

impl LoopComparison {
    pub fn closed_rate(&self) -> f64 {
        rate(&self.closed)
    }

    pub fn open_rate(&self) -> f64 {
        rate(&self.open)
    }
}

fn rate(v: &[bool]) -> f64 {
    v.iter().filter(|&&b| b).count() as f64 / v.len().max(1) as f64
}

/// Run `base` closed- and open-loop for every seed.
pub fn loop_comparison(base: &RunConfig, seeds: &[u64], policy: ExecPolicy) -> Result<LoopComparison, SimError> {
    let run = |seed: u64, mode: Mode| -> Result<bool, SimError> {
        let cfg = RunConfig {
            seed,
            mode,
            ..base.clone()
        };
        Ok(run_episode(&cfg)?.reached_without_collision())
    };
    let outcomes = policy.map_slice(seeds, |&s| Ok::<_, SimError>((run(s, Mode::ClosedLoop)?, run(s, Mode::OpenLoop)?)));
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(LoopComparison {
        seeds: seeds.to_vec(),
        closed: outcomes.iter().map(|o| o.0).collect(),
        open: outcomes.iter().map(|o| o.1).collect(),
    })
}

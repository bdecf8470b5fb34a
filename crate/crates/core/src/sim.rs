//! Receding-horizon navigation: plan, act on the noisy simulator, render the
//! camera image from the true pose, filter, shift the plan, repeat.
//!
//! Every random draw comes from a stream derived from the master seed and a
//! role tag (see [`crate::seed`]), so a run is a pure function of its config.

use crate::dynamics::{simulate_step, state_retract, Control, FlatTrajectory, FlatWaypoint, FullState, NoiseSpec, Robot};
use crate::estimator::{filter_step, propagate, Belief, EstimatorError, FilterConfig, StateVector};
use crate::field::{AnalyticScene, FieldError, RadianceField};
use crate::planner::{intersection_count, CostTerms, PlanError, PlanResult, PlannerConfig, Problem};
use crate::render::{render_image, RenderError, RenderOptions, RenderedImage};
use crate::scenes;
use crate::seed::{derive_seed, rng_from, substream, TAG_PIXEL_SELECT, TAG_RENDER_JITTER, TAG_SIM_NOISE};
use crate::dynamics::DynamicsError;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    ClosedLoop,
    /// Execute the initial plan's controls without sensing.
    OpenLoop,
    PlanOnly,
    /// Re-run the filter over a recorded run's controls and images.
    EstimateOnly,
}

/// Where a scene or robot comes from: a built-in name or a JSON file
/// (relative paths resolve against the config file's directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Builtin { builtin: String },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub format_version: u32,
    pub scene: Source,
    /// `None` takes the robot of a built-in scene, else the default quadrotor.
    pub robot: Option<Source>,
    pub planner: PlannerConfig,
    pub filter: FilterConfig,
    /// True initial state; `None` uses the built-in scene's start.
    pub start: Option<FullState>,
    /// Tangent offset of the initial belief mean from the true start.
    pub start_offset: [f64; 12],
    /// Σ₀ = `start_variance`·I.
    pub start_variance: f64,
    /// `None` uses the built-in scene's goal.
    pub goal: Option<FlatWaypoint>,
    pub mode: Mode,
    pub max_steps: usize,
    /// m
    pub goal_tolerance: f64,
    pub seed: u64,
    /// Overrides the robot's process noise.
    pub noise: Option<NoiseSpec>,
    /// Stratified jitter on measurement renders.
    pub measurement_jitter: bool,
    /// Write each measurement image as PPM with a JSON sidecar here.
    pub image_dir: Option<PathBuf>,
    /// Run log replayed by [`Mode::EstimateOnly`].
    pub replay: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: RUN_FORMAT_VERSION,
            scene: Source::Builtin {
                builtin: "playground".into(),
            },
            robot: None,
            planner: PlannerConfig::default(),
            filter: FilterConfig::default(),
            start: None,
            start_offset: [0.0; 12],
            start_variance: 0.1,
            goal: None,
            mode: Mode::default(),
            max_steps: 60,
            goal_tolerance: 0.05,
            seed: 0,
            noise: None,
            measurement_jitter: false,
            image_dir: None,
            replay: None,
        }
    }
}

/// A config with its files loaded.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scene: AnalyticScene,
    pub robot: Robot,
    pub start: FullState,
    pub goal: FlatWaypoint,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let mut cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Source::File(p) = &mut cfg.scene {
            rebase(p);
        }
        if let Some(Source::File(p)) = &mut cfg.robot {
            rebase(p);
        }
        if let Some(p) = &mut cfg.image_dir {
            rebase(p);
        }
        if let Some(p) = &mut cfg.replay {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn resolve(&self) -> Result<Resolved, SimError> {
        if self.format_version != RUN_FORMAT_VERSION {
            return Err(SimError::InvalidConfig(format!("unsupported format_version {}", self.format_version)));
        }
        let builtin = match &self.scene {
            Source::Builtin { builtin } => {
                Some(scenes::by_name(builtin).ok_or_else(|| SimError::InvalidConfig(format!("unknown scene `{builtin}`")))?)
            }
            Source::File(_) => None,
        };
        let scene = match (&self.scene, &builtin) {
            (Source::File(p), _) => AnalyticScene::load(p)?,
            (_, Some(b)) => b.scene.clone(),
            _ => unreachable!(),
        };
        let mut robot = match &self.robot {
            Some(Source::File(p)) => Robot::load(p)?,
            Some(Source::Builtin { builtin }) => match builtin.as_str() {
                "quadrotor" => Robot::quadrotor(),
                other => scenes::by_name(other)
                    .map(|s| s.robot)
                    .ok_or_else(|| SimError::InvalidConfig(format!("unknown robot `{other}`")))?,
            },
            None => builtin.as_ref().map(|b| b.robot.clone()).unwrap_or_default(),
        };
        if let Some(n) = self.noise {
            robot.noise = n;
        }
        robot.validate()?;
        let start = self
            .start
            .or(builtin.as_ref().map(|b| b.start))
            .ok_or_else(|| SimError::InvalidConfig("no start state".into()))?;
        let goal = self
            .goal
            .or(builtin.as_ref().map(|b| b.goal))
            .ok_or_else(|| SimError::InvalidConfig("no goal".into()))?;
        if !scene.bounds().contains(&goal.position) {
            return Err(SimError::InvalidConfig("goal outside scene bounds".into()));
        }
        if !(self.goal_tolerance > 0.0) || !(self.start_variance > 0.0) {
            return Err(SimError::InvalidConfig("goal tolerance and start variance must be positive".into()));
        }
        self.planner.validate()?;
        self.filter.validate()?;
        Ok(Resolved {
            scene,
            robot,
            start,
            goal,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Reached,
    Collided,
    Timeout,
    PlannerFailed,
    FilterDiverged,
    /// Plan-only and estimate-only runs.
    Completed,
}

/// One executed control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// s, after the control was applied.
    pub time: f64,
    pub truth: FullState,
    pub belief: Belief,
    pub control: Control,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<FlatTrajectory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostTerms>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub measurement_loss: f64,
    pub process_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: Status,
    pub steps: usize,
    pub final_distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The first plan, from the initial belief.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_plan: Option<FlatTrajectory>,
}

/// JSON-lines: a header, one line per step, and a summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header {
        format_version: u32,
        seed: u64,
        mode: Mode,
        start: FullState,
        belief: Belief,
        goal: FlatWaypoint,
    },
    Step(Box<StepRecord>),
    Summary(RunSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub seed: u64,
    pub mode: Mode,
    pub start: FullState,
    pub initial_belief: Belief,
    pub goal: FlatWaypoint,
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl RunLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), SimError> {
        let header = LogLine::Header {
            format_version: RUN_FORMAT_VERSION,
            seed: self.seed,
            mode: self.mode,
            start: self.start,
            belief: self.initial_belief,
            goal: self.goal,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, &LogLine::Step(Box::new(r.clone())))?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &LogLine::Summary(self.summary.clone()))?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, SimError> {
        let mut header = None;
        let mut records = Vec::new();
        let mut summary = None;
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                LogLine::Header {
                    format_version,
                    seed,
                    mode,
                    start,
                    belief,
                    goal,
                } => {
                    if format_version != RUN_FORMAT_VERSION {
                        return Err(SimError::InvalidConfig(format!("unsupported run log version {format_version}")));
                    }
                    header = Some((seed, mode, start, belief, goal));
                }
                LogLine::Step(r) => records.push(*r),
                LogLine::Summary(s) => summary = Some(s),
            }
        }
        let (seed, mode, start, initial_belief, goal) = header.ok_or_else(|| SimError::InvalidConfig("run log has no header".into()))?;
        let summary = summary.ok_or_else(|| SimError::InvalidConfig("run log has no summary".into()))?;
        Ok(Self {
            seed,
            mode,
            start,
            initial_belief,
            goal,
            records,
            summary,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn reached_without_collision(&self) -> bool {
        self.summary.status == Status::Reached
    }
}

/// What the episode hands to an observer after each sensing step.
pub struct Observation<'a> {
    pub t: usize,
    pub truth: &'a FullState,
    /// Predicted belief the image is about to correct.
    pub prior: &'a Belief,
    pub image: &'a RenderedImage,
}

pub fn run_episode(config: &RunConfig) -> Result<RunLog, SimError> {
    run_episode_observed(config, |_| {})
}

fn initial_belief(config: &RunConfig, start: &FullState) -> Belief {
    let offset = StateVector::from_row_slice(&config.start_offset);
    Belief::isotropic(state_retract(start, &offset), config.start_variance)
}

fn plan_first(problem: &Problem<'_, AnalyticScene>, belief: &Belief, goal: &FlatWaypoint) -> Result<PlanResult, PlanError> {
    match problem.plan(&belief.mean, goal) {
        Err(PlanError::NonFiniteCost { best, .. }) => Ok(*best),
        other => other,
    }
}

/// [`run_episode`] with a hook that sees every measurement image and the
/// true state it was rendered from.
pub fn run_episode_observed<O: FnMut(&Observation)>(config: &RunConfig, mut observe: O) -> Result<RunLog, SimError> {
    let res = config.resolve()?;
    if config.mode == Mode::EstimateOnly {
        return replay_episode(config, &res);
    }
    let robot = &res.robot;
    let scene = &res.scene;
    let body = robot.body_model();
    let problem = Problem::new(scene, robot, &body, &config.planner);
    let belief0 = initial_belief(config, &res.start);
    let mut log = RunLog {
        seed: config.seed,
        mode: config.mode,
        start: res.start,
        initial_belief: belief0,
        goal: res.goal,
        records: Vec::new(),
        summary: RunSummary {
            status: Status::Timeout,
            steps: 0,
            final_distance: (res.start.position() - res.goal.position).norm(),
            error: None,
            initial_plan: None,
        },
    };
    if config.mode != Mode::PlanOnly && log.summary.final_distance < config.goal_tolerance {
        log.summary.status = Status::Reached;
        return Ok(log);
    }
    let mut plan = match plan_first(&problem, &belief0, &res.goal) {
        Ok(p) => p,
        Err(e) => {
            log.summary.status = Status::PlannerFailed;
            log.summary.error = Some(e.to_string());
            return Ok(log);
        }
    };
    log.summary.initial_plan = Some(plan.trajectory.clone());
    if config.mode == Mode::PlanOnly {
        log.summary.status = Status::Completed;
        return Ok(log);
    }

    let mut sim_rng = rng_from(derive_seed(config.seed, TAG_SIM_NOISE));
    let pixel_seed = derive_seed(config.seed, TAG_PIXEL_SELECT);
    let jitter_seed = derive_seed(config.seed, TAG_RENDER_JITTER);
    let diameter = scene.bounds().diameter();
    let open_controls = plan.controls.clone();
    let mut truth = res.start;
    let mut belief = belief0;
    let q = config.filter.q();
    for t in 0..config.max_steps {
        let (u, cost) = match config.mode {
            Mode::OpenLoop => match open_controls.get(t) {
                Some(u) => (*u, None),
                None => break,
            },
            _ => {
                if t > 0 {
                    plan = match problem.replan(&plan.trajectory, &belief.mean) {
                        Ok(p) => p,
                        Err(PlanError::NonFiniteCost { best, .. }) => *best,
                        Err(e) => {
                            log.summary.status = Status::PlannerFailed;
                            log.summary.error = Some(e.to_string());
                            break;
                        }
                    };
                }
                (plan.controls[0], plan.final_cost())
            }
        };
        truth = simulate_step(&truth, &u, robot, &robot.noise, &mut sim_rng);
        let mut record = StepRecord {
            t,
            time: (t + 1) as f64 * robot.dt,
            truth,
            belief,
            control: u,
            plan: (config.mode == Mode::ClosedLoop).then(|| plan.trajectory.clone()),
            cost,
            image: None,
            measurement_loss: 0.0,
            process_loss: 0.0,
        };
        if config.mode == Mode::OpenLoop {
            belief = propagate(&belief, &u, robot, &q);
        } else {
            let opts = RenderOptions {
                jitter_seed: config.measurement_jitter.then(|| substream(jitter_seed, t as u64)),
                ..config.filter.render
            };
            // The measurement comes from where the robot really is.
            let cam = truth.pose * config.filter.camera_mount;
            let image = render_image(scene, &config.filter.camera, &cam, &opts, None, config.filter.policy)?;
            let prior = propagate(&belief, &u, robot, &q);
            observe(&Observation {
                t,
                truth: &truth,
                prior: &prior,
                image: &image,
            });
            if let Some(dir) = &config.image_dir {
                std::fs::create_dir_all(dir)?;
                let name = format!("step_{t:04}.ppm");
                image.write_ppm(dir.join(&name))?;
                image.write_raw(dir.join(format!("step_{t:04}.bin")), &cam, config.seed)?;
                record.image = Some(name);
            }
            let filtered = filter_step(&belief, &u, &image, scene, robot, &config.filter, substream(pixel_seed, t as u64), t);
            match filtered {
                Ok(rec) => {
                    belief = rec.posterior;
                    record.measurement_loss = rec.measurement_loss;
                    record.process_loss = rec.process_loss;
                }
                Err(e) => {
                    log.summary.status = Status::FilterDiverged;
                    log.summary.error = Some(e.to_string());
                    record.belief = prior;
                    log.records.push(record);
                    break;
                }
            }
        }
        record.belief = belief;
        log.records.push(record);
        let distance = (truth.position() - res.goal.position).norm();
        log.summary.final_distance = distance;
        if intersection_count(std::slice::from_ref(&truth), scene, &body) > 0 {
            log.summary.status = Status::Collided;
            break;
        }
        if config.mode == Mode::ClosedLoop && (belief.mean.position() - truth.position()).norm() > diameter {
            log.summary.status = Status::FilterDiverged;
            break;
        }
        if distance < config.goal_tolerance {
            log.summary.status = Status::Reached;
            break;
        }
    }
    log.summary.steps = log.records.len();
    Ok(log)
}

/// Filter a recorded run again from its controls and stored images.
fn replay_episode(config: &RunConfig, res: &Resolved) -> Result<RunLog, SimError> {
    let path = config
        .replay
        .as_ref()
        .ok_or_else(|| SimError::InvalidConfig("estimate-only mode needs `replay`".into()))?;
    let source = RunLog::load(path)?;
    let dir = config
        .image_dir
        .clone()
        .or_else(|| path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let pixel_seed = derive_seed(config.seed, TAG_PIXEL_SELECT);
    let mut belief = initial_belief(config, &source.start);
    let mut records = Vec::with_capacity(source.records.len());
    for r in &source.records {
        let name = r
            .image
            .as_ref()
            .ok_or_else(|| SimError::InvalidConfig(format!("step {} has no image", r.t)))?;
        let image = RenderedImage::read_ppm(dir.join(name))?;
        let rec = filter_step(&belief, &r.control, &image, &res.scene, &res.robot, &config.filter, substream(pixel_seed, r.t as u64), r.t)?;
        belief = rec.posterior;
        records.push(StepRecord {
            belief,
            measurement_loss: rec.measurement_loss,
            process_loss: rec.process_loss,
            plan: None,
            cost: None,
            ..r.clone()
        });
    }
    Ok(RunLog {
        seed: config.seed,
        mode: Mode::EstimateOnly,
        start: source.start,
        initial_belief: initial_belief(config, &source.start),
        goal: source.goal,
        summary: RunSummary {
            status: Status::Completed,
            steps: records.len(),
            final_distance: source.summary.final_distance,
            error: None,
            initial_plan: None,
        },
        records,
    })
}

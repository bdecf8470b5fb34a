use clap::{Parser, Subcommand};
use nerf_nav::baselines::{compare_planners, ComparisonConfig, ComparisonReport};
use nerf_nav::estimator::{FilterConfig, FilterRecord};
use nerf_nav::experiments::FilterComparison;
use nerf_nav::field::AnalyticScene;
use nerf_nav::geom::Pose;
use nerf_nav::plot;
use nerf_nav::render::{render_image, RenderOptions};
use nerf_nav::scenes;
use nerf_nav::sim::{run_episode, Mode, RunConfig, RunLog, Source};
use nalgebra::Vector3;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "nerf-nav", version, about = "Plan, estimate and navigate through analytic radiance fields")]
struct Cli {
    /// Master seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where outputs are written.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Plan once from the start state and write plan.json and plan.csv.
    Plan {
        /// Built-in scene name or scene JSON file.
        #[arg(long)]
        scene: Option<String>,
    },
    /// Re-run the filter over a recorded run log and its images (by default
    /// the `images` directory next to the log).
    Estimate {
        #[arg(long)]
        replay: PathBuf,
    },
    /// Run a full episode and write runlog.jsonl.
    Navigate {
        #[arg(long)]
        scene: Option<String>,
        /// Execute the initial plan without sensing.
        #[arg(long)]
        open_loop: bool,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Save every measurement image under <out-dir>/images.
        #[arg(long)]
        images: bool,
    },
    /// Proposed planner against min-snap and RRT on stone-ring scenarios.
    Compare {
        #[arg(long, default_value_t = 10)]
        scenarios: usize,
    },
    /// Render one image.
    Render {
        /// `identity`, `x,y,z` or `x,y,z,yaw` (camera-to-world).
        #[arg(long, default_value = "identity")]
        pose: String,
        #[arg(long)]
        scene: Option<String>,
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long, default_value_t = 128)]
        samples: usize,
    },
    /// Turn a run log, filter trace or comparison report into SVG.
    Plot {
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

type Failure = Box<dyn std::error::Error>;

fn scene_source(s: &str) -> Source {
    if Path::new(s).exists() || s.ends_with(".json") {
        Source::File(s.into())
    } else {
        Source::Builtin { builtin: s.into() }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_pose(s: &str) -> Result<Pose, Failure> {
    if s == "identity" {
        return Ok(Pose::identity());
    }
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Pose::from_translation(Vector3::new(x, y, z))),
        [x, y, z, yaw] => Ok(Pose::from_yaw(yaw, Vector3::new(x, y, z))),
        _ => Err(format!("pose `{s}` must be identity, x,y,z or x,y,z,yaw").into()),
    }
}

fn load_scene(name: &str) -> Result<AnalyticScene, Failure> {
    match scene_source(name) {
        Source::File(p) => Ok(AnalyticScene::load(p)?),
        Source::Builtin { builtin } => Ok(scenes::by_name(&builtin)
            .ok_or_else(|| format!("unknown scene `{builtin}`; built-ins: {}", scenes::NAMES.join(", ")))?
            .scene),
    }
}

fn write_svg(path: &Path, svg: &str) -> Result<(), Failure> {
    std::fs::write(path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn plot_file(input: &Path, output: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(input)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.contains("\"kind\"") {
        let log = RunLog::read_jsonl(text.as_bytes())?;
        return write_svg(output, &plot::render_panels(&plot::runlog_panels(&log), 3));
    }
    if first.contains("\"posterior\"") {
        let recs: Vec<FilterRecord> = nerf_nav::estimator::read_trace(&text)?;
        let t: Vec<f64> = recs.iter().map(|r| r.t as f64).collect();
        let errs: Vec<_> = recs
            .iter()
            .filter_map(|r| r.truth.map(|x| nerf_nav::estimator::state_errors(&r.posterior.mean, &x)))
            .collect();
        if errs.len() != recs.len() {
            return Err("filter trace has no ground truth to plot against".into());
        }
        let panel = plot::Panel::new("estimate error", "timestep", "error")
            .with(plot::Series::new("translation (m)", t.clone(), errs.iter().map(|e| e.0).collect()))
            .with(plot::Series::new("rotation (rad)", t.clone(), errs.iter().map(|e| e.1).collect()))
            .with(plot::Series::new("velocity (m/s)", t, errs.iter().map(|e| e.2).collect()));
        return write_svg(output, &plot::render_panels(&[panel], 1));
    }
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("rows").is_some() {
        let report: ComparisonReport = serde_json::from_value(value)?;
        return write_svg(output, &plot::comparison_svg(&report));
    }
    if value.get("baseline").is_some() {
        let cmp: FilterComparison = serde_json::from_value(value)?;
        return write_svg(output, &plot::render_panels(&plot::filter_comparison_panels(&cmp.full, &cmp.baseline), 3));
    }
    Err(format!("{}: not a run log, filter trace or report", input.display()).into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    std::fs::create_dir_all(&cli.out_dir)?;
    let out = |name: &str| cli.out_dir.join(name);
    match &cli.command {
        Command::Plan { scene } => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = scene {
                cfg.scene = scene_source(s);
            }
            cfg.mode = Mode::PlanOnly;
            let res = cfg.resolve()?;
            let body = res.robot.body_model();
            let problem = nerf_nav::planner::Problem::new(&res.scene, &res.robot, &body, &cfg.planner);
            let plan = problem.plan(&res.start, &res.goal)?;
            plan.write_json(out("plan.json"))?;
            plan.write_csv(out("plan.csv"))?;
            let c = plan.final_cost().unwrap_or_default();
            println!(
                "planned {} steps in {} iterations: collision {:.4}, control {:.4}",
                plan.controls.len(),
                plan.iterations,
                c.collision,
                c.control
            );
        }
        Command::Estimate { replay } => {
            let mut cfg = load_config(&cli)?;
            cfg.mode = Mode::EstimateOnly;
            cfg.replay = Some(replay.clone());
            if cfg.image_dir.is_none() {
                let beside = replay.parent().unwrap_or(Path::new(".")).join("images");
                cfg.image_dir = beside.is_dir().then_some(beside);
            }
            let log = run_episode(&cfg)?;
            log.save(out("estimate.jsonl"))?;
            println!("replayed {} steps", log.records.len());
        }
        Command::Navigate {
            scene,
            open_loop,
            max_steps,
            images,
        } => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = scene {
                cfg.scene = scene_source(s);
            }
            if *open_loop {
                cfg.mode = Mode::OpenLoop;
            }
            if let Some(n) = max_steps {
                cfg.max_steps = *n;
            }
            if *images {
                let dir = out("images");
                std::fs::create_dir_all(&dir)?;
                cfg.image_dir = Some(dir);
            }
            let log = run_episode(&cfg)?;
            log.save(out("runlog.jsonl"))?;
            println!(
                "{:?} after {} steps, {:.3} m from the goal",
                log.summary.status, log.summary.steps, log.summary.final_distance
            );
        }
        Command::Compare { scenarios } => {
            let cfg = load_config(&cli)?;
            let setup = scenes::pillar_field();
            let cases = scenes::pillar_scenarios(*scenarios, cfg.seed);
            let cc = ComparisonConfig {
                planner: cfg.planner.clone(),
                seed: cfg.seed,
                ..ComparisonConfig::default()
            };
            let report = compare_planners(&setup.scene, &setup.robot, &cases, &cc);
            report.write(out("comparison.csv"), out("comparison.json"))?;
            for k in nerf_nav::baselines::PlannerKind::ALL {
                println!(
                    "{:>9}: failure rate {:.2}, control {:.4}, collision {:.4}",
                    k.name(),
                    report.failure_rate(k),
                    report.mean_control(k),
                    report.mean_collision(k)
                );
            }
        }
        Command::Render {
            pose,
            scene,
            size,
            samples,
        } => {
            let cfg = load_config(&cli)?;
            let field = match scene {
                Some(s) => load_scene(s)?,
                None => cfg.resolve()?.scene,
            };
            let pose = parse_pose(pose)?;
            let camera = nerf_nav::render::Camera::square(*size, *size as f64);
            let opts = RenderOptions {
                n_samples: *samples,
                background: field.background().into(),
                jitter_seed: None,
            };
            let image = render_image(&field, &camera, &pose, &opts, None, FilterConfig::default().policy)?;
            image.write_ppm(out("render.ppm"))?;
            image.write_raw(out("render.bin"), &pose, cfg.seed)?;
            println!("wrote {}", out("render.ppm").display());
        }
        Command::Plot { input, output } => {
            let target = output.clone().unwrap_or_else(|| {
                let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
                out(&format!("{stem}.svg"))
            });
            plot_file(input, &target)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

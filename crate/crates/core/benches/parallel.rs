//! Sequential against rayon execution for the data-parallel hot loops.
//! On a single core the two should match; the gap on more cores is the
//! point of the comparison.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nerf_nav::dynamics::Control;
use nerf_nav::estimator::{correct, propagate, Belief, FilterConfig};
use nerf_nav::experiments::{filter_monte_carlo, FilterTrialConfig};
use nerf_nav::planner::{initial_trajectory, PlannerConfig, Problem};
use nerf_nav::render::{render_image, Camera, RenderOptions};
use nerf_nav::scenes;
use nerf_nav::ExecPolicy;
use std::hint::black_box;

const POLICIES: [ExecPolicy; 2] = [ExecPolicy::Sequential, ExecPolicy::Parallel];

fn name(p: ExecPolicy) -> &'static str {
    match p {
        ExecPolicy::Sequential => "sequential",
        ExecPolicy::Parallel => "parallel",
    }
}

fn render(c: &mut Criterion) {
    let s = scenes::pillar_field();
    let cfg = FilterConfig::default();
    let cam = Camera::square(64, 64.0);
    let pose = s.start.pose * cfg.camera_mount;
    let opts = RenderOptions {
        n_samples: 64,
        ..RenderOptions::default()
    };
    let mut g = c.benchmark_group("render_64x64");
    g.sample_size(10);
    for p in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name(p)), |b| {
            b.iter(|| render_image(&s.scene, &cam, black_box(&pose), &opts, None, p).unwrap())
        });
    }
    g.finish();
}

fn planner_gradient(c: &mut Criterion) {
    let s = scenes::block_2d();
    let body = s.robot.body_model();
    let mut g = c.benchmark_group("planner_cost_and_gradient");
    g.sample_size(10);
    for p in POLICIES {
        let cfg = PlannerConfig {
            policy: p,
            ..PlannerConfig::default()
        };
        let problem = Problem::new(&s.scene, &s.robot, &body, &cfg);
        let init = initial_trajectory(
            &[s.start.position(), s.goal.position],
            0.0,
            0.0,
            cfg.horizon,
            s.robot.dt,
            cfg.yaw_init,
        )
        .pinned_to(&s.start);
        g.bench_function(BenchmarkId::from_parameter(name(p)), |b| {
            b.iter(|| problem.cost_and_gradient(black_box(&init)).unwrap())
        });
    }
    g.finish();
}

fn filter_update(c: &mut Criterion) {
    let s = scenes::pillar_field();
    let mut g = c.benchmark_group("filter_update");
    g.sample_size(10);
    for p in POLICIES {
        let cfg = FilterConfig {
            policy: p,
            ..FilterConfig::default()
        };
        let u = Control::hover(&s.robot);
        let prior = propagate(&Belief::isotropic(s.start, 0.1), &u, &s.robot, &cfg.q());
        let truth = prior.mean;
        let image = render_image(&s.scene, &cfg.camera, &(truth.pose * cfg.camera_mount), &cfg.render, None, p).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name(p)), |b| {
            b.iter(|| correct(black_box(&prior), &image, &s.scene, &cfg, 3, 0).unwrap())
        });
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let s = scenes::pillar_field();
    let controls = vec![Control::hover(&s.robot); 2];
    let mut g = c.benchmark_group("filter_trials");
    g.sample_size(10);
    for p in POLICIES {
        let mut cfg = FilterTrialConfig {
            trials: 2,
            policy: p,
            ..FilterTrialConfig::default()
        };
        cfg.filter.camera = Camera::square(48, 48.0);
        g.bench_function(BenchmarkId::from_parameter(name(p)), |b| {
            b.iter(|| filter_monte_carlo(&s, black_box(&controls), &cfg))
        });
    }
    g.finish();
}

criterion_group!(benches, render, planner_gradient, filter_update, monte_carlo);
criterion_main!(benches);

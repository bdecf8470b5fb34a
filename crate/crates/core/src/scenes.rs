//! Built-in analytic scenes and scenario generators used by the CLI, the
//! benches and the experiment harnesses.

use crate::baselines::Scenario;
use crate::dynamics::{FlatWaypoint, FullState, Robot};
use crate::field::{Aabb, AnalyticScene, OccupancyOracle, Primitive};
use crate::geom::Pose;
use crate::seed::rng_from;
use nalgebra::Vector3;
use rand::Rng;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

/// A scene, a robot and a start/goal pair.
#[derive(Debug, Clone)]
pub struct Setup {
    pub scene: AnalyticScene,
    pub robot: Robot,
    pub start: FullState,
    pub goal: FlatWaypoint,
}

const STONE: [f64; 3] = [0.75, 0.7, 0.62];

/// Names accepted by [`by_name`].
pub const NAMES: [&str; 5] = ["empty", "block", "pillars", "playground", "couch"];

pub fn by_name(name: &str) -> Option<Setup> {
    match name {
        "empty" => Some(empty()),
        "block" => Some(block_2d()),
        "pillars" => Some(pillar_field()),
        "playground" => Some(playground()),
        "couch" => Some(couch_gap()),
        _ => None,
    }
}

pub fn empty() -> Setup {
    Setup {
        scene: AnalyticScene::empty(Aabb::new(Vector3::new(-2.0, -2.0, 0.0), Vector3::new(2.0, 2.0, 2.0))),
        robot: Robot::quadrotor(),
        start: FullState::at_rest(Pose::from_translation(Vector3::new(-1.0, 0.0, 1.0))),
        goal: FlatWaypoint::new(Vector3::new(1.0, 0.0, 1.0), 0.0),
    }
}

/// One dense box straddling the straight line between start and goal,
/// slightly off center so the optimizer has a preferred side. The robot is a
/// small planar body.
pub fn block_2d() -> Setup {
    let scene = AnalyticScene::empty(Aabb::new(Vector3::new(-1.5, -1.2, 0.0), Vector3::new(1.5, 1.2, 1.0)))
        .with_primitive(
            Primitive::cylinder(Pose::from_translation(Vector3::new(0.0, 0.08, 0.5)), 0.25, 0.6, 100.0, STONE)
                .with_softness(0.06),
        );
    Setup {
        scene,
        robot: Robot::planar([0.05, 0.05, 0.05]),
        start: FullState::at_rest(Pose::from_translation(Vector3::new(-1.0, 0.0, 0.5))),
        goal: FlatWaypoint::new(Vector3::new(1.0, 0.0, 0.5), 0.0),
    }
}

fn ground(bounds: &Aabb, albedo: [f64; 3]) -> Primitive {
    let e = bounds.extent();
    Primitive::cuboid(
        Pose::from_translation(Vector3::new(bounds.center().x, bounds.center().y, bounds.min.z + 0.05)),
        [0.5 * e.x, 0.5 * e.y, 0.05],
        100.0,
        albedo,
    )
    .with_softness(0.005)
    .with_texture(0.8, 9.0)
}

/// A ring of textured standing stones with lintels, a central altar, and a
/// textured floor.
pub fn pillar_field() -> Setup {
    let bounds = Aabb::new(Vector3::new(-2.2, -2.2, -0.1), Vector3::new(2.2, 2.2, 1.6));
    let mut scene = AnalyticScene::empty(bounds).with_primitive(ground(&bounds, [0.45, 0.55, 0.35]));
    let ring = 1.1;
    let n = 8;
    for k in 0..n {
        let a = TAU * k as f64 / n as f64;
        let c = Vector3::new(ring * a.cos(), ring * a.sin(), 0.6);
        scene = scene.with_primitive(
            Primitive::cuboid(Pose::from_yaw(a, c), [0.12, 0.2, 0.6], 100.0, STONE)
                .with_softness(0.01)
                .with_texture(0.7, 14.0),
        );
        if k % 2 == 0 {
            let b = TAU * (k as f64 + 0.5) / n as f64;
            let c = Vector3::new(ring * b.cos(), ring * b.sin(), 1.3);
            scene = scene.with_primitive(
                Primitive::cuboid(Pose::from_yaw(b + FRAC_PI_2, c), [0.5, 0.12, 0.08], 100.0, [0.65, 0.6, 0.55])
                    .with_softness(0.01)
                    .with_texture(0.6, 11.0),
            );
        }
    }
    scene = scene.with_primitive(
        Primitive::cylinder(Pose::from_translation(Vector3::new(0.0, 0.0, 0.45)), 0.25, 0.45, 100.0, [0.8, 0.45, 0.35])
            .with_softness(0.01)
            .with_texture(0.7, 12.0),
    );
    Setup {
        scene,
        robot: Robot::quadrotor(),
        start: FullState::at_rest(Pose::from_translation(Vector3::new(-1.8, 0.0, 0.6))),
        goal: FlatWaypoint::new(Vector3::new(1.8, 0.0, 0.6), 0.0),
    }
}

/// `n` start/goal pairs on opposite sides of the stone ring whose straight
/// connection crosses the altar.
pub fn pillar_scenarios(n: usize, seed: u64) -> Vec<Scenario> {
    let setup = pillar_field();
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a: f64 = rng.random_range(0.0..TAU);
        let b = a + PI + rng.random_range(-0.15..0.15);
        let r = rng.random_range(1.65..1.9);
        let start = Vector3::new(r * a.cos(), r * a.sin(), rng.random_range(0.35..0.8));
        let goal = Vector3::new(r * b.cos(), r * b.sin(), rng.random_range(0.35..0.8));
        if setup.scene.signed_distance(&start) < 0.3 || setup.scene.signed_distance(&goal) < 0.3 {
            continue;
        }
        out.push(Scenario {
            name: format!("pillars-{:02}", out.len()),
            start,
            goal,
        });
    }
    out
}

/// A compact obstacle course for closed-loop runs: three textured posts and
/// a high beam inside a textured room, so the camera always sees structure.
pub fn playground() -> Setup {
    let bounds = Aabb::new(Vector3::new(-1.8, -1.4, -0.1), Vector3::new(1.8, 1.4, 1.5));
    let post = |x: f64, y: f64, albedo: [f64; 3]| {
        Primitive::cylinder(Pose::from_translation(Vector3::new(x, y, 0.6)), 0.12, 0.6, 100.0, albedo)
            .with_softness(0.01)
            .with_texture(0.7, 15.0)
    };
    let wall = |c: Vector3<f64>, half: [f64; 3], albedo: [f64; 3]| {
        Primitive::cuboid(Pose::from_translation(c), half, 100.0, albedo)
            .with_softness(0.01)
            .with_texture(0.8, 10.0)
    };
    let scene = AnalyticScene::empty(bounds)
        .with_primitive(ground(&bounds, [0.35, 0.5, 0.6]))
        .with_primitive(wall(Vector3::new(1.7, 0.0, 0.7), [0.05, 1.3, 0.7], [0.85, 0.55, 0.4]))
        .with_primitive(wall(Vector3::new(-1.7, 0.0, 0.7), [0.05, 1.3, 0.7], [0.5, 0.7, 0.45]))
        .with_primitive(wall(Vector3::new(0.0, 1.3, 0.7), [1.65, 0.05, 0.7], [0.6, 0.5, 0.8]))
        .with_primitive(wall(Vector3::new(0.0, -1.3, 0.7), [1.65, 0.05, 0.7], [0.8, 0.75, 0.45]))
        .with_primitive(post(-0.35, 0.05, [0.9, 0.3, 0.25]))
        .with_primitive(post(0.3, -0.25, [0.3, 0.8, 0.3]))
        .with_primitive(post(0.35, 0.4, [0.3, 0.35, 0.9]))
        .with_primitive(
            Primitive::cuboid(Pose::from_translation(Vector3::new(0.9, 0.0, 1.0)), [0.06, 1.2, 0.08], 100.0, [0.9, 0.8, 0.3])
                .with_softness(0.01)
                .with_texture(0.6, 12.0),
        );
    Setup {
        scene,
        robot: Robot::quadrotor(),
        start: FullState::at_rest(Pose::from_translation(Vector3::new(-1.1, 0.0, 0.6))),
        goal: FlatWaypoint::new(Vector3::new(1.2, 0.1, 0.7), 0.0),
    }
}

/// Long-axis yaw that fits through the gap in [`couch_gap`].
pub const COUCH_GAP_YAW: f64 = 0.0;

/// A wall across the x-axis with one opening narrower than the couch is long
/// but wider than it is deep. The couch starts turned across its direction
/// of travel.
pub fn couch_gap() -> Setup {
    let bounds = Aabb::new(Vector3::new(-1.5, -1.5, 0.0), Vector3::new(1.5, 1.5, 0.6));
    let gap = 0.3;
    let half = 0.5 * (bounds.extent().y - gap) * 0.5 + 0.05;
    let mut scene = AnalyticScene::empty(bounds);
    for sign in [-1.0, 1.0] {
        let cy = sign * (0.5 * gap + half);
        scene = scene.with_primitive(
            Primitive::cuboid(Pose::from_translation(Vector3::new(0.0, cy, 0.3)), [0.05, half, 0.5], 100.0, STONE)
                .with_softness(0.01),
        );
    }
    Setup {
        scene,
        robot: Robot::planar([0.2, 0.1, 0.05]),
        start: FullState::at_rest(Pose::from_yaw(FRAC_PI_2, Vector3::new(-0.8, 0.0, 0.3))),
        goal: FlatWaypoint::new(Vector3::new(0.8, 0.0, 0.3), FRAC_PI_2),
    }
}

/// Randomized single-block scenes: obstacle radius, offset and start/goal
/// lateral offsets vary per draw; the straight start-goal line always cuts
/// the obstacle.
pub fn block_draws(n: usize, seed: u64) -> Vec<Setup> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            let mut s = block_2d();
            let radius = rng.random_range(0.18..0.3);
            let c = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.1..0.1), 0.5);
            s.scene.primitives = vec![Primitive::cylinder(Pose::from_translation(c), radius, 0.6, 100.0, STONE).with_softness(0.06)];
            let y0 = rng.random_range(-0.05..0.05);
            s.start = FullState::at_rest(Pose::from_translation(Vector3::new(-1.0, c.y + y0, 0.5)));
            s.goal = FlatWaypoint::new(Vector3::new(1.0, c.y - y0, 0.5), 0.0);
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::RadianceField;

    #[test]
    fn endpoints_free() {
        for name in NAMES {
            let s = by_name(name).unwrap();
            let r = s.robot.body_model().radius();
            for p in [s.start.position(), s.goal.position] {
                assert!(s.scene.signed_distance(&p) > r, "{name}");
                assert!(s.scene.bounds().contains(&p));
            }
        }
    }

    #[test]
    fn couch_gap_dimensions() {
        let s = couch_gap();
        let body = s.robot.body.half_extents;
        let mut opening = 0.0;
        let mut y = 0.0;
        while !s.scene.occupied(&Vector3::new(0.0, y, 0.3)) {
            y += 1e-3;
            opening = 2.0 * y;
        }
        assert!(opening > 2.0 * body[1] && opening < 2.0 * body[0], "{opening}");
    }

    #[test]
    fn scenario_lines_cross_altar() {
        let s = pillar_field();
        for sc in pillar_scenarios(10, 4) {
            let hit = (0..=100).any(|k| s.scene.occupied(&(sc.start + (sc.goal - sc.start) * (k as f64 / 100.0))));
            assert!(hit, "{}", sc.name);
        }
    }
}

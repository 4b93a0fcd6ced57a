//! Deterministic 2-D planar pushing environment with obstacle layouts,
//! quasi-static contact, rendered observations, and evaluation-only oracles.

pub mod explore;
pub mod layout;
pub mod oracle;
pub mod render;

pub use explore::{scripted_explore, Trajectory};
pub use layout::{Layout, LayoutRegistry, Task};
pub use render::{EFFECTOR_RADIUS, PUCK_RADIUS};

use crate::error::{ReplanError, Result};
use crate::geom::{Rect, Vec2};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Full simulator state; everything else (images, oracles) derives from it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvState {
    pub robot_xy: Vec2,
    pub puck_xy: Vec2,
    pub layout_id: String,
    pub step_count: u32,
}

/// Evaluation-only ground truth attached to an observation.
#[derive(Debug, Clone)]
pub struct Truth {
    pub state: EnvState,
    pub robot_mask: Array2<bool>,
    pub puck_mask: Array2<bool>,
}

/// What the agent sees: an RGB image in `[0,1]`, `[3,H,W]`. Ground truth is
/// attached only when the environment was built in eval mode.
#[derive(Debug, Clone)]
pub struct Observation {
    pub image: Array3<f64>,
    pub truth: Option<Truth>,
}

/// Stable FNV-1a hash, used to derive per-layout RNG streams.
pub(crate) fn fnv1a(data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// The pusher simulator. One instance per rollout worker; stepping the same
/// instance concurrently is not supported.
pub struct PusherEnv {
    pub layout: Arc<Layout>,
    pub resolution: usize,
    pub t_max: u32,
    pub max_step: f64,
    truth_enabled: bool,
    clip_warnings: AtomicU64,
}

impl PusherEnv {
    pub fn new(
        layout: Arc<Layout>,
        resolution: usize,
        t_max: u32,
        max_step: f64,
        truth_enabled: bool,
    ) -> Result<Self> {
        if ![32, 64, 128].contains(&resolution) {
            return Err(ReplanError::Config(format!(
                "resolution {resolution} unsupported (use 32, 64 or 128)"
            )));
        }
        Ok(Self {
            layout,
            resolution,
            t_max,
            max_step,
            truth_enabled,
            clip_warnings: AtomicU64::new(0),
        })
    }

    /// Build from a run config plus explicit layout name.
    pub fn from_config(cfg: &crate::config::Config, layout_name: &str, truth: bool) -> Result<Self> {
        let reg = LayoutRegistry::from_config(&cfg.str("env.layout_file"))?;
        let layout = reg.get(layout_name)?;
        Self::new(
            layout,
            cfg.usize("env.resolution"),
            cfg.usize("env.t_max") as u32,
            cfg.f64("env.max_step"),
            truth,
        )
    }

    /// Number of out-of-range actions clipped so far.
    pub fn clip_warning_count(&self) -> u64 {
        self.clip_warnings.load(Ordering::Relaxed)
    }

    fn free_point(&self, p: Vec2, clearance: f64) -> bool {
        if p.x < clearance || p.x > 1.0 - clearance || p.y < clearance || p.y > 1.0 - clearance {
            return false;
        }
        !self
            .layout
            .walls
            .iter()
            .any(|w| w.inflate(clearance).contains(p))
    }

    fn sample_free_in(&self, region: Rect, clearance: f64, rng: &mut ChaCha8Rng) -> Vec2 {
        for _ in 0..10_000 {
            let p = Vec2::new(
                rng.gen_range(region.x0..region.x1),
                rng.gen_range(region.y0..region.y1),
            );
            if self.free_point(p, clearance + 0.005) {
                return p;
            }
        }
        panic!(
            "layout {} leaves no free space in region {region:?}",
            self.layout.name
        );
    }

    /// Reset with a seeded collision-free placement. Identical seeds yield
    /// bit-identical states.
    pub fn reset(&self, seed: u64) -> (EnvState, Observation) {
        let stream = fnv1a(self.layout.name.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);

        let puck_xy = if self.layout.task == Task::Reach {
            Vec2::new(0.85, 0.85)
        } else {
            self.sample_free_in(self.layout.start_region, PUCK_RADIUS, &mut rng)
        };
        let robot_xy = loop {
            let p = self.sample_free_in(
                Rect::new(0.08, 0.08, 0.92, 0.92),
                EFFECTOR_RADIUS,
                &mut rng,
            );
            if p.dist(puck_xy) > PUCK_RADIUS + EFFECTOR_RADIUS + 0.01 {
                break p;
            }
        };
        let state = EnvState {
            robot_xy,
            puck_xy,
            layout_id: self.layout.name.clone(),
            step_count: 0,
        };
        let obs = self.observe(&state);
        (state, obs)
    }

    /// Move a disc by `delta`, clipping against walls and the workspace
    /// boundary axis by axis.
    fn move_disc(&self, pos: Vec2, delta: Vec2, clearance: f64) -> Vec2 {
        let mut p = pos;
        // x axis
        p.x = (p.x + delta.x).clamp(clearance, 1.0 - clearance);
        for _ in 0..2 {
            for w in &self.layout.walls {
                let iw = w.inflate(clearance);
                if iw.contains(p) {
                    p.x = if delta.x > 0.0 { iw.x0 } else { iw.x1 };
                }
            }
        }
        // y axis
        p.y = (p.y + delta.y).clamp(clearance, 1.0 - clearance);
        for _ in 0..2 {
            for w in &self.layout.walls {
                let iw = w.inflate(clearance);
                if iw.contains(p) {
                    p.y = if delta.y > 0.0 { iw.y0 } else { iw.y1 };
                }
            }
        }
        p
    }

    /// Advance one step. Out-of-range actions are clipped (and counted).
    pub fn step(&self, state: &EnvState, action: [f64; 2]) -> (EnvState, Observation, bool) {
        let mut a = action;
        if a.iter().any(|v| !(-1.0..=1.0).contains(v) || !v.is_finite()) {
            self.clip_warnings.fetch_add(1, Ordering::Relaxed);
            a = [
                if a[0].is_finite() { a[0].clamp(-1.0, 1.0) } else { 0.0 },
                if a[1].is_finite() { a[1].clamp(-1.0, 1.0) } else { 0.0 },
            ];
        }
        let delta = Vec2::new(a[0] * self.max_step, a[1] * self.max_step);
        let new_robot = self.move_disc(state.robot_xy, delta, EFFECTOR_RADIUS);

        let contact_dist = PUCK_RADIUS + EFFECTOR_RADIUS;
        let mut new_puck = state.puck_xy;
        let mut robot = new_robot;
        if robot.dist(new_puck) < contact_dist {
            let fallback = delta.normalized_or(Vec2::new(1.0, 0.0));
            let n = new_puck.sub(robot).normalized_or(fallback);
            let target = robot.add(n.scale(contact_dist));
            new_puck = self.move_disc(new_puck, target.sub(new_puck), PUCK_RADIUS);
            if robot.dist(new_puck) < contact_dist - 1e-9 {
                // puck blocked by a wall: the effector yields
                let n2 = new_puck.sub(robot).normalized_or(n);
                let eff_target = new_puck.sub(n2.scale(contact_dist));
                robot = self.move_disc(robot, eff_target.sub(robot), EFFECTOR_RADIUS);
            }
        }

        let next = EnvState {
            robot_xy: robot,
            puck_xy: new_puck,
            layout_id: state.layout_id.clone(),
            step_count: state.step_count + 1,
        };
        let done = next.step_count >= self.t_max;
        let obs = self.observe(&next);
        (next, obs, done)
    }

    /// Render a state at an arbitrary supported resolution.
    pub fn render(&self, state: &EnvState, resolution: usize) -> Result<Array3<f64>> {
        if ![32, 64, 128].contains(&resolution) {
            return Err(ReplanError::Config(format!(
                "resolution {resolution} unsupported (use 32, 64 or 128)"
            )));
        }
        Ok(render::render_scene(
            &self.layout.walls,
            state.robot_xy,
            state.puck_xy,
            resolution,
        )
        .image)
    }

    /// Observation at the environment's own resolution.
    pub fn observe(&self, state: &EnvState) -> Observation {
        let out = render::render_scene(
            &self.layout.walls,
            state.robot_xy,
            state.puck_xy,
            self.resolution,
        );
        let truth = if self.truth_enabled {
            let (robot_mask, puck_mask) = render::truth_masks(&out);
            Some(Truth {
                state: state.clone(),
                robot_mask,
                puck_mask,
            })
        } else {
            None
        };
        Observation {
            image: out.image,
            truth,
        }
    }

    /// Sample a goal state: puck (or effector, for reach tasks) placed in the
    /// goal region, robot parked at a canonical pose beside the goal.
    pub fn sample_goal(&self, seed: u64) -> (EnvState, Observation) {
        let stream = fnv1a(self.layout.name.as_bytes()) ^ 0x9e3779b97f4a7c15;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);

        let (puck_xy, robot_xy) = if self.layout.task == Task::Reach {
            let robot = self.sample_free_in(self.layout.goal_region, EFFECTOR_RADIUS, &mut rng);
            (Vec2::new(0.85, 0.85), robot)
        } else {
            let puck = loop {
                let p = self.sample_free_in(self.layout.goal_region, PUCK_RADIUS, &mut rng);
                if self.goal_reachable(p) {
                    break p;
                }
            };
            (puck, self.canonical_robot_pose(puck))
        };

        let state = EnvState {
            robot_xy,
            puck_xy,
            layout_id: self.layout.name.clone(),
            step_count: 0,
        };
        let obs = self.observe(&state);
        (state, obs)
    }

    /// Effector parked next to the goal puck, first collision-free slot
    /// preferring the side facing the workspace center.
    fn canonical_robot_pose(&self, puck: Vec2) -> Vec2 {
        let r = PUCK_RADIUS + EFFECTOR_RADIUS + 0.015;
        let to_center = Vec2::new(0.5, 0.5).sub(puck).normalized_or(Vec2::new(0.0, -1.0));
        let base_angle = to_center.y.atan2(to_center.x);
        for k in 0..16 {
            let off = (k as f64 + 1.0) / 2.0 * std::f64::consts::PI / 4.0;
            for sign in [1.0, -1.0] {
                let ang = base_angle + sign * off * if k % 2 == 0 { 1.0 } else { 0.5 };
                let p = puck.add(Vec2::new(ang.cos(), ang.sin()).scale(r));
                if self.free_point(p, EFFECTOR_RADIUS) {
                    return p;
                }
            }
        }
        puck.add(to_center.scale(r))
    }

    fn goal_reachable(&self, goal_puck: Vec2) -> bool {
        let start = Vec2::new(
            (self.layout.start_region.x0 + self.layout.start_region.x1) * 0.5,
            (self.layout.start_region.y0 + self.layout.start_region.y1) * 0.5,
        );
        matches!(
            oracle::bfs_distance(&self.layout.walls, start, goal_puck, 1.0 / 32.0, PUCK_RADIUS),
            Ok(Some(_))
        )
    }

    /// BFS shortest-path length between the puck cells of two states.
    /// `None` means disconnected.
    pub fn oracle_distance(
        &self,
        a: &EnvState,
        b: &EnvState,
        grid_step: f64,
    ) -> Result<Option<usize>> {
        oracle::bfs_distance(&self.layout.walls, a.puck_xy, b.puck_xy, grid_step, PUCK_RADIUS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(name: &str) -> PusherEnv {
        let reg = LayoutRegistry::builtin();
        PusherEnv::new(reg.get(name).unwrap(), 32, 50, 0.03, false).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_seed_sensitive() {
        let e = env("pusher1");
        let (s1, _) = e.reset(7);
        let (s2, _) = e.reset(7);
        let (s3, _) = e.reset(8);
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
    }

    #[test]
    fn reset_places_puck_outside_walls() {
        let e = env("pusher2");
        for seed in 0..20 {
            let (s, _) = e.reset(seed);
            assert!(
                e.free_point(s.puck_xy, PUCK_RADIUS),
                "seed {seed}: puck at {:?} collides",
                s.puck_xy
            );
            assert!(e.free_point(s.robot_xy, EFFECTOR_RADIUS));
        }
    }

    #[test]
    fn zero_action_only_advances_the_clock() {
        let e = env("pusher1");
        let (s, _) = e.reset(3);
        let (s2, _, done) = e.step(&s, [0.0, 0.0]);
        assert_eq!(s2.robot_xy, s.robot_xy);
        assert_eq!(s2.puck_xy, s.puck_xy);
        assert_eq!(s2.step_count, 1);
        assert!(!done);
    }

    #[test]
    fn no_contact_leaves_puck_alone() {
        let e = env("open");
        let mut s = EnvState {
            robot_xy: Vec2::new(0.2, 0.2),
            puck_xy: Vec2::new(0.8, 0.8),
            layout_id: "open".into(),
            step_count: 0,
        };
        for _ in 0..5 {
            let (s2, _, _) = e.step(&s, [1.0, 0.0]);
            assert_eq!(s2.puck_xy, s.puck_xy);
            s = s2;
        }
    }

    #[test]
    fn push_from_left_moves_puck_right() {
        let e = env("open");
        let s = EnvState {
            robot_xy: Vec2::new(0.5 - PUCK_RADIUS - EFFECTOR_RADIUS - 1e-4, 0.5),
            puck_xy: Vec2::new(0.5, 0.5),
            layout_id: "open".into(),
            step_count: 0,
        };
        let (s2, _, _) = e.step(&s, [1.0, 0.0]);
        assert!(
            s2.puck_xy.x > s.puck_xy.x + 0.01,
            "puck did not move: {:?}",
            s2.puck_xy
        );
        assert!((s2.puck_xy.y - 0.5).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_action_is_clipped_and_counted() {
        let e = env("open");
        let (s, _) = e.reset(1);
        let before = e.clip_warning_count();
        let (_, _, _) = e.step(&s, [3.0, -7.0]);
        assert_eq!(e.clip_warning_count(), before + 1);
    }

    #[test]
    fn walls_stay_solid_under_pressure() {
        let e = env("pusher2");
        let (mut s, _) = e.reset(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (s2, _, _) = e.step(&s, a);
            assert!(e.free_point(s2.robot_xy, EFFECTOR_RADIUS - 1e-9));
            assert!(e.free_point(s2.puck_xy, PUCK_RADIUS - 1e-9));
            s = s2;
        }
    }

    #[test]
    fn goals_are_reachable_and_reproducible() {
        let e = env("pusher2");
        for seed in [0, 1, 2] {
            let (g, _) = e.sample_goal(seed);
            assert!(e.free_point(g.puck_xy, PUCK_RADIUS));
            let d = e
                .oracle_distance(
                    &EnvState {
                        robot_xy: g.robot_xy,
                        puck_xy: Vec2::new(0.15, 0.5),
                        layout_id: "pusher2".into(),
                        step_count: 0,
                    },
                    &g,
                    1.0 / 32.0,
                )
                .unwrap();
            assert!(d.is_some(), "goal seed {seed} unreachable");
        }
        let (g1, _) = e.sample_goal(4);
        let (g2, _) = e.sample_goal(4);
        assert_eq!(g1, g2);
    }
}

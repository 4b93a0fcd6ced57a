//! Seeded scripted exploration: a momentum random walk with a
//! contact-seeking bias that regularly drives the effector through the puck.
//! Supplies the encoder pretraining dataset and reachability pre-tests.

use super::{EnvState, PusherEnv, EFFECTOR_RADIUS, PUCK_RADIUS};
use crate::geom::Vec2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One rollout: states (length steps+1) and the actions between them.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub layout_id: String,
    pub seed: u64,
    pub states: Vec<EnvState>,
    pub actions: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Net puck displacement over the whole episode.
    pub fn puck_travel(&self) -> f64 {
        let a = self.states.first().map(|s| s.puck_xy);
        let b = self.states.last().map(|s| s.puck_xy);
        match (a, b) {
            (Some(a), Some(b)) => a.dist(b),
            _ => 0.0,
        }
    }
}

/// Probability that a new waypoint aims straight through the puck.
const PUSH_BIAS: f64 = 0.55;
const WAYPOINT_TIMEOUT: u32 = 60;
const REACHED_DIST: f64 = 0.045;

fn sample_waypoint(env: &PusherEnv, state: &EnvState, rng: &mut ChaCha8Rng) -> Vec2 {
    if rng.gen_range(0.0..1.0) < PUSH_BIAS {
        // aim beyond the puck so the effector pushes through it
        let through = state
            .puck_xy
            .sub(state.robot_xy)
            .normalized_or(Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let wp = state.puck_xy.add(through.scale(0.18));
        Vec2::new(wp.x.clamp(0.06, 0.94), wp.y.clamp(0.06, 0.94))
    } else {
        Vec2::new(rng.gen_range(0.08..0.92), rng.gen_range(0.08..0.92))
    }
}

/// Run `episodes` scripted episodes of `env.t_max` steps each.
pub fn scripted_explore(env: &PusherEnv, episodes: usize, seed: u64) -> Vec<Trajectory> {
    (0..episodes)
        .map(|ep| scripted_episode(env, seed, ep as u64))
        .collect()
}

/// One scripted episode; `(seed, index)` fully determines it.
pub fn scripted_episode(env: &PusherEnv, seed: u64, index: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5c71_0000 ^ index);
    let episode_seed = seed.wrapping_mul(1_000_003).wrapping_add(index);
    let (mut state, _) = env.reset(episode_seed);

    let mut states = Vec::with_capacity(env.t_max as usize + 1);
    let mut actions = Vec::with_capacity(env.t_max as usize);
    states.push(state.clone());

    let mut waypoint = sample_waypoint(env, &state, &mut rng);
    let mut age = 0u32;
    let mut vel = Vec2::new(0.0, 0.0);

    for _ in 0..env.t_max {
        if state.robot_xy.dist(waypoint) < REACHED_DIST || age > WAYPOINT_TIMEOUT {
            waypoint = sample_waypoint(env, &state, &mut rng);
            age = 0;
        }
        age += 1;
        let dir = waypoint.sub(state.robot_xy).normalized_or(Vec2::new(0.0, 0.0));
        vel = vel.scale(0.75).add(dir.scale(0.55));
        let action = [
            (vel.x + rng.gen_range(-0.08..0.08)).clamp(-1.0, 1.0),
            (vel.y + rng.gen_range(-0.08..0.08)).clamp(-1.0, 1.0),
        ];
        let (next, _, _) = env.step(&state, action);
        actions.push(action);
        states.push(next.clone());
        state = next;
    }

    Trajectory {
        layout_id: env.layout.name.clone(),
        seed: episode_seed,
        states,
        actions,
    }
}

/// Effector positioned in contact with the puck, as used by heatmap probes.
pub fn probe_state(env: &PusherEnv, puck_xy: Vec2) -> EnvState {
    let r = PUCK_RADIUS + EFFECTOR_RADIUS + 0.012;
    let to_center = Vec2::new(0.5, 0.5).sub(puck_xy).normalized_or(Vec2::new(0.0, -1.0));
    let base_angle = to_center.y.atan2(to_center.x);
    let mut robot = puck_xy.add(to_center.scale(r));
    for k in 0..16 {
        let ang = base_angle + k as f64 * std::f64::consts::PI / 8.0;
        let p = puck_xy.add(Vec2::new(ang.cos(), ang.sin()).scale(r));
        let clear = p.x > EFFECTOR_RADIUS
            && p.x < 1.0 - EFFECTOR_RADIUS
            && p.y > EFFECTOR_RADIUS
            && p.y < 1.0 - EFFECTOR_RADIUS
            && !env
                .layout
                .walls
                .iter()
                .any(|w| w.inflate(EFFECTOR_RADIUS).contains(p));
        if clear {
            robot = p;
            break;
        }
    }
    EnvState {
        robot_xy: robot,
        puck_xy,
        layout_id: env.layout.name.clone(),
        step_count: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::LayoutRegistry;

    fn env() -> PusherEnv {
        let reg = LayoutRegistry::builtin();
        PusherEnv::new(reg.get("pusher1").unwrap(), 32, 100, 0.03, false).unwrap()
    }

    #[test]
    fn episodes_have_full_length_and_reproduce() {
        let e = env();
        let a = scripted_explore(&e, 3, 9);
        let b = scripted_explore(&e, 3, 9);
        assert_eq!(a.len(), 3);
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.len(), 100);
            assert_eq!(ta.states, tb.states);
        }
    }

    #[test]
    fn exploration_moves_the_puck() {
        let e = env();
        let trajs = scripted_explore(&e, 10, 123);
        let moved = trajs.iter().filter(|t| t.puck_travel() > 0.05).count();
        assert!(moved >= 1, "no trajectory moved the puck");
    }
}

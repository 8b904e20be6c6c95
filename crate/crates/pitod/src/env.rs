//! Built-in continuous-control environments.
//!
//! Both environments are dependency free, fully deterministic under a
//! fixed episode seed, and keep observations and rewards inside
//! documented bounds:
//!
//! * `pendulum` — torque-limited swing-up. Observation
//!   `[cos th, sin th, omega / 8]`, all components in `[-1, 1]`. Reward is
//!   the classic quadratic cost rescaled to `[-1, 0]`; the maximum 0 is
//!   attained upright at rest with zero torque.
//! * `point_mass` — 2-D reach toward the origin with velocity damping.
//!   Observation `[px, py, vx, vy]` in `[-1, 1]^4`, reward in `[-1, 0]`,
//!   terminal when within 0.05 of the goal.
//!
//! Reward magnitudes never exceed [`REWARD_BOUND`], so a poisoned reward
//! is bounded by `scale * REWARD_BOUND`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

/// Upper bound on `|reward|` for every built-in environment.
pub const REWARD_BOUND: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode")]
    EpisodeDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Pendulum,
    PointMass,
}

/// Static description of an environment instance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub max_episode_steps: u32,
}

impl EnvSpec {
    pub fn obs_dim(&self) -> usize {
        match self.name {
            EnvName::Pendulum => 3,
            EnvName::PointMass => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.name {
            EnvName::Pendulum => 1,
            EnvName::PointMass => 2,
        }
    }
}

/// Observable state plus bookkeeping; internal coordinates ride along so
/// transitions are a pure function of `(state, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: u32,
    pub done: bool,
    internal: Internal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Internal {
    Pendulum { theta: f64, omega: f64 },
    PointMass { px: f64, py: f64, vx: f64, vy: f64 },
}

const PENDULUM_DT: f64 = 0.05;
const PENDULUM_G: f64 = 10.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;
const PENDULUM_MAX_TORQUE: f64 = 2.0;
/// max of `th^2 + 0.1 w^2 + 0.001 u^2` over the reachable set.
const PENDULUM_MAX_COST: f64 =
    std::f64::consts::PI * std::f64::consts::PI + 0.1 * 64.0 + 0.001 * 4.0;

const POINT_GOAL_RADIUS: f64 = 0.05;
const POINT_MAX_COST: f64 = 2.0 + 0.1 * 2.0;

fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = (theta + std::f64::consts::PI) % two_pi;
    if t < 0.0 {
        t += two_pi;
    }
    t - std::f64::consts::PI
}

/// Deterministic initial state for `episode_seed`.
pub fn reset(spec: &EnvSpec, episode_seed: u64) -> EnvState {
    let mut rng = seeds::rng(episode_seed, "env-reset", 0);
    let internal = match spec.name {
        EnvName::Pendulum => Internal::Pendulum {
            theta: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            omega: rng.gen_range(-1.0..1.0),
        },
        EnvName::PointMass => {
            let radius = rng.gen_range(0.5..0.9);
            let angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            Internal::PointMass { px: radius * angle.cos(), py: radius * angle.sin(), vx: 0.0, vy: 0.0 }
        }
    };
    EnvState { observation: observe(&internal), step_index: 0, done: false, internal }
}

fn observe(internal: &Internal) -> Vec<f64> {
    match internal {
        Internal::Pendulum { theta, omega } => {
            vec![theta.cos(), theta.sin(), omega / PENDULUM_MAX_SPEED]
        }
        Internal::PointMass { px, py, vx, vy } => vec![*px, *py, *vx, *vy],
    }
}

/// Deterministic transition. Out-of-range action components are clamped to
/// `[-1, 1]`; the caller can count clamps via the return flag.
pub fn step(
    spec: &EnvSpec,
    state: &EnvState,
    action: &[f64],
) -> Result<(EnvState, f64, bool), EnvError> {
    if state.done {
        return Err(EnvError::EpisodeDone);
    }
    debug_assert_eq!(action.len(), spec.action_dim());
    let mut clamped = false;
    let a: Vec<f64> = action
        .iter()
        .map(|v| {
            if *v < -1.0 || *v > 1.0 {
                clamped = true;
            }
            v.clamp(-1.0, 1.0)
        })
        .collect();

    let (internal, reward, terminal) = match state.internal {
        Internal::Pendulum { theta, omega } => {
            let torque = a[0] * PENDULUM_MAX_TORQUE;
            let th_norm = wrap_angle(theta);
            let cost = th_norm * th_norm + 0.1 * omega * omega + 0.001 * torque * torque;
            let reward = -cost / PENDULUM_MAX_COST;
            let omega_next = (omega
                + (3.0 * PENDULUM_G / 2.0 * theta.sin() + 3.0 * torque) * PENDULUM_DT)
                .clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
            let theta_next = wrap_angle(theta + omega_next * PENDULUM_DT);
            (Internal::Pendulum { theta: theta_next, omega: omega_next }, reward, false)
        }
        Internal::PointMass { px, py, vx, vy } => {
            let cost = px * px + py * py + 0.1 * (vx * vx + vy * vy);
            let reward = -cost / POINT_MAX_COST;
            let vx_next = (0.9 * vx + 0.3 * a[0]).clamp(-1.0, 1.0);
            let vy_next = (0.9 * vy + 0.3 * a[1]).clamp(-1.0, 1.0);
            let px_next = (px + 0.1 * vx_next).clamp(-1.0, 1.0);
            let py_next = (py + 0.1 * vy_next).clamp(-1.0, 1.0);
            let reached = (px_next * px_next + py_next * py_next).sqrt() < POINT_GOAL_RADIUS;
            (
                Internal::PointMass { px: px_next, py: py_next, vx: vx_next, vy: vy_next },
                reward,
                reached,
            )
        }
    };

    let step_index = state.step_index + 1;
    let done = terminal || step_index >= spec.max_episode_steps;
    let next = EnvState { observation: observe(&internal), step_index, done, internal };
    debug_assert!(reward.is_finite() && reward.abs() <= REWARD_BOUND + 1e-12);
    Ok((next, reward, clamped))
}

/// Adversarial reward transform: `r -> -scale * r`.
pub fn poison_reward(r: f64, scale: f64) -> f64 {
    -scale * r
}

/// A pendulum state balanced upright at rest (used by tests).
#[cfg(test)]
pub fn pendulum_upright(spec: &EnvSpec) -> EnvState {
    let internal = Internal::Pendulum { theta: 0.0, omega: 0.0 };
    let _ = spec;
    EnvState { observation: observe(&internal), step_index: 0, done: false, internal }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pendulum() -> EnvSpec {
        EnvSpec { name: EnvName::Pendulum, max_episode_steps: 200 }
    }

    fn point_mass() -> EnvSpec {
        EnvSpec { name: EnvName::PointMass, max_episode_steps: 200 }
    }

    #[test]
    fn reset_is_deterministic() {
        for spec in [pendulum(), point_mass()] {
            let a = reset(&spec, 42);
            let b = reset(&spec, 42);
            assert_eq!(a, b);
            assert_eq!(a.step_index, 0);
            assert!(!a.done);
        }
    }

    #[test]
    fn observations_stay_in_bounds() {
        for spec in [pendulum(), point_mass()] {
            for seed in 0..1000u64 {
                let s = reset(&spec, seed);
                assert_eq!(s.observation.len(), spec.obs_dim());
                assert!(s.observation.iter().all(|v| v.abs() <= 1.0 + 1e-12), "seed {seed}");
            }
        }
    }

    #[test]
    fn rollout_observations_and_rewards_bounded() {
        for spec in [pendulum(), point_mass()] {
            let mut state = reset(&spec, 7);
            let mut rng = crate::seeds::rng(3, "test-actions", 0);
            while !state.done {
                let action: Vec<f64> =
                    (0..spec.action_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (next, reward, _) = step(&spec, &state, &action).unwrap();
                assert!(next.observation.iter().all(|v| v.abs() <= 1.0 + 1e-12));
                assert!((-REWARD_BOUND..=0.0).contains(&reward));
                state = next;
            }
        }
    }

    #[test]
    fn upright_rest_zero_action_gives_max_reward() {
        let spec = pendulum();
        let state = pendulum_upright(&spec);
        let (_, reward, _) = step(&spec, &state, &[0.0]).unwrap();
        assert_eq!(reward, 0.0);
    }

    #[test]
    fn step_cap_sets_done() {
        let spec = pendulum();
        let mut state = reset(&spec, 0);
        for _ in 0..200 {
            let (next, _, _) = step(&spec, &state, &[0.1]).unwrap();
            state = next;
        }
        assert!(state.done);
        assert_eq!(state.step_index, 200);
        assert_eq!(step(&spec, &state, &[0.0]), Err(EnvError::EpisodeDone));
    }

    #[test]
    fn transitions_are_pure() {
        let spec = point_mass();
        let state = reset(&spec, 5);
        let a = [0.3, -0.7];
        assert_eq!(step(&spec, &state, &a).unwrap(), step(&spec, &state, &a).unwrap());
    }

    #[test]
    fn full_rollouts_replay_identically() {
        let spec = pendulum();
        let run = |seed: u64| -> Vec<f64> {
            let mut state = reset(&spec, seed);
            let mut rng = crate::seeds::rng(seed, "replay", 1);
            let mut rewards = Vec::new();
            while !state.done {
                let a = [rng.gen_range(-1.0..1.0)];
                let (next, r, _) = step(&spec, &state, &a).unwrap();
                rewards.push(r);
                state = next;
            }
            rewards
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn out_of_range_action_is_clamped_and_flagged() {
        let spec = pendulum();
        let state = reset(&spec, 1);
        let (next_clamped, r_clamped, flagged) = step(&spec, &state, &[5.0]).unwrap();
        let (next_unit, r_unit, not_flagged) = step(&spec, &state, &[1.0]).unwrap();
        assert!(flagged && !not_flagged);
        assert_eq!(next_clamped, next_unit);
        assert_eq!(r_clamped, r_unit);
    }

    #[test]
    fn point_mass_terminates_at_goal() {
        let spec = point_mass();
        let mut state = reset(&spec, 11);
        // Steer toward the origin greedily.
        for _ in 0..200 {
            if state.done {
                break;
            }
            let (px, py) = (state.observation[0], state.observation[1]);
            let norm = (px * px + py * py).sqrt().max(1e-9);
            let a = [-px / norm, -py / norm];
            let (next, _, _) = step(&spec, &state, &a).unwrap();
            state = next;
        }
        assert!(state.done);
        assert!(state.step_index < 200, "terminated early at {}", state.step_index);
    }

    #[test]
    fn poison_reward_examples() {
        assert_eq!(poison_reward(0.5, 100.0), -50.0);
        assert_eq!(poison_reward(0.0, 100.0), 0.0);
        assert_eq!(poison_reward(-1.0, 100.0), 100.0);
    }
}

//! Inverted pendulum balanced by a bounded torque, integrated
//! semi-implicitly. The episode is over once the pole passes the horizontal.
//!
//! Costs are kept in `[0, 2]`: zero while balanced, a one-off cost of 2 on
//! the step that drops the pole, zero forever after (absorbing). Minimizing
//! this is the same as balancing for as long as possible; the conventional
//! "-1 per balanced step" score is reported separately by the harness.

use crate::env::{ActionSpace, EnvAction, Environment};
use crate::geometry::ActionSet;
use crate::rng::Rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendulumSpec {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub dt: f64,
    pub torque_limit: f64,
    pub gamma: f64,
    pub episode_cap: usize,
    /// Initial angle/velocity perturbation scale.
    pub init_spread: f64,
}

impl Default for PendulumSpec {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            dt: 0.05,
            torque_limit: 3.0,
            gamma: 0.99,
            episode_cap: 1000,
            init_spread: 0.05,
        }
    }
}

pub struct PendulumEnv {
    pub spec: PendulumSpec,
}

impl PendulumEnv {
    pub fn new(spec: PendulumSpec) -> Self {
        Self { spec }
    }

    pub fn action_set(&self) -> ActionSet {
        ActionSet::Box { lower: vec![-self.spec.torque_limit], upper: vec![self.spec.torque_limit] }
    }

    fn fallen(theta: f64) -> bool {
        theta.abs() > std::f64::consts::FRAC_PI_2
    }
}

/// Semi-implicit Euler step of `theta'' = (g/l) sin(theta) + u / (m l^2)`.
pub fn pendulum_step(spec: &PendulumSpec, state: &[f64], u: f64) -> (Vec<f64>, f64) {
    let (theta, omega) = (state[0], state[1]);
    if PendulumEnv::fallen(theta) {
        return (state.to_vec(), 0.0); // absorbed after the fall
    }
    let torque = u.clamp(-spec.torque_limit, spec.torque_limit);
    let accel = (spec.gravity / spec.length) * theta.sin()
        + torque / (spec.mass * spec.length * spec.length);
    let omega_next = omega + spec.dt * accel;
    let theta_next = theta + spec.dt * omega_next;
    let cost = if PendulumEnv::fallen(theta_next) { 2.0 } else { 0.0 };
    (vec![theta_next, omega_next], cost)
}

impl Environment for PendulumEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(self.action_set())
    }

    fn cost_bound(&self) -> f64 {
        2.0
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let spread = self.spec.init_spread;
        vec![
            (rng.gen::<f64>() * 2.0 - 1.0) * spread,
            (rng.gen::<f64>() * 2.0 - 1.0) * spread,
        ]
    }

    fn step(&self, state: &[f64], action: &EnvAction, _rng: &mut Rng) -> (Vec<f64>, f64) {
        let u = match action {
            EnvAction::Vector(v) => v[0],
            EnvAction::Index(_) => panic!("pendulum expects continuous actions"),
        };
        pendulum_step(&self.spec, state, u)
    }

    fn is_absorbing(&self, state: &[f64]) -> bool {
        Self::fallen(state[0])
    }

    fn discount(&self) -> f64 {
        self.spec.gamma
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncontrolled_pendulum_falls_and_absorbs() {
        let spec = PendulumSpec::default();
        let mut state = vec![0.1, 0.0];
        let mut fell_at = None;
        for t in 0..1000 {
            let (next, cost) = pendulum_step(&spec, &state, 0.0);
            state = next;
            if cost > 0.0 {
                fell_at = Some(t);
                break;
            }
        }
        let t = fell_at.expect("an unactuated pendulum must fall");
        assert!(t < 200);
        // absorbed afterwards: no further cost, state frozen
        let (next, cost) = pendulum_step(&spec, &state, 1.0);
        assert_eq!(cost, 0.0);
        assert_eq!(next, state);
    }

    #[test]
    fn counter_torque_delays_the_fall() {
        let spec = PendulumSpec::default();
        let survive = |u_gain: f64| -> usize {
            let mut state = vec![0.05, 0.0];
            for t in 0..1000 {
                let u = -u_gain * (state[0] * 20.0 + state[1] * 6.0);
                let (next, cost) = pendulum_step(&spec, &state, u);
                state = next;
                if cost > 0.0 {
                    return t;
                }
            }
            1000
        };
        assert!(survive(1.0) > survive(0.0));
        assert_eq!(survive(1.0), 1000); // the linear feedback balances it
    }

    #[test]
    fn torque_is_clamped_to_the_limit() {
        let spec = PendulumSpec::default();
        let (a, _) = pendulum_step(&spec, &[0.0, 0.0], 100.0);
        let (b, _) = pendulum_step(&spec, &[0.0, 0.0], spec.torque_limit);
        assert_eq!(a, b);
    }
}

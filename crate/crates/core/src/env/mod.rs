//! Desk-scale environments: a trap grid world, a random tabular MDP
//! generator, a discrete-time LQR, and an ODE pendulum, plus the sampling
//! interface the function-approximation runs are built on.

mod gridworld;
mod lqr;
mod pendulum;
mod random_mdp;

pub use gridworld::{gridworld_to_tabular, GridWorldEnv, GridWorldSpec};
pub use lqr::{dare_fixed_point, lqr_gain, LqrEnv, LqrSpec};
pub use pendulum::{PendulumEnv, PendulumSpec};
pub use random_mdp::random_tabular;

use crate::geometry::ActionSet;
use crate::mdp::TabularMdp;
use crate::rng::Rng;
use rand::Rng as _;

/// Action taken in an environment: a vertex index for finite action sets
/// or a point for continuous ones.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvAction {
    Index(usize),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Finite(usize),
    Continuous(ActionSet),
}

impl ActionSpace {
    pub fn n_finite(&self) -> Option<usize> {
        match self {
            ActionSpace::Finite(n) => Some(*n),
            ActionSpace::Continuous(_) => None,
        }
    }

    /// Uniform draw over the action space: a uniform vertex for finite
    /// spaces, a uniform point inside the box for continuous ones.
    pub fn sample_uniform(&self, rng: &mut Rng) -> EnvAction {
        match self {
            ActionSpace::Finite(n) => EnvAction::Index(rng.gen_range(0..*n)),
            ActionSpace::Continuous(set) => match set {
                ActionSet::Box { lower, upper } => EnvAction::Vector(
                    lower
                        .iter()
                        .zip(upper)
                        .map(|(&l, &u)| l + rng.gen::<f64>() * (u - l))
                        .collect(),
                ),
                ActionSet::Simplex(n) => {
                    // Dirichlet(1) gives the uniform distribution on the simplex.
                    let mut v: Vec<f64> =
                        (0..*n).map(|_| -(rng.gen::<f64>().max(1e-300)).ln()).collect();
                    let s: f64 = v.iter().sum();
                    for x in &mut v {
                        *x /= s;
                    }
                    EnvAction::Vector(v)
                }
                ActionSet::Polyhedral { .. } => {
                    EnvAction::Vector(set.project(&vec![0.0; set.dim()]))
                }
            },
        }
    }
}

/// A sampled environment: supports resets to a random initial state and
/// single transition steps. Covers both general-state/finite-action and
/// continuous stochastic control problems; implementations carry no
/// mutable state so concurrent rollouts only need independent generators.
pub trait Environment: Sync {
    fn state_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Declared bound on the instantaneous cost.
    fn cost_bound(&self) -> f64;
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;
    /// Applies `action` in `state`; returns the successor and the cost.
    fn step(&self, state: &[f64], action: &EnvAction, rng: &mut Rng) -> (Vec<f64>, f64);
    /// Absorbing states end episodes early (zero cost forever after).
    fn is_absorbing(&self, _state: &[f64]) -> bool {
        false
    }
    fn discount(&self) -> f64;
}

/// Wraps a [`TabularMdp`] as a sampled environment. The state vector is the
/// single-entry `[state_index]`; initial states are uniform.
pub struct TabularEnv {
    pub mdp: TabularMdp,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp) -> Self {
        Self { mdp }
    }

    pub fn state_index(state: &[f64]) -> usize {
        state[0] as usize
    }
}

impl Environment for TabularEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Finite(self.mdp.n_actions)
    }

    fn cost_bound(&self) -> f64 {
        self.mdp.c_bar
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![rng.gen_range(0..self.mdp.n_states) as f64]
    }

    fn step(&self, state: &[f64], action: &EnvAction, rng: &mut Rng) -> (Vec<f64>, f64) {
        let s = Self::state_index(state);
        let a = match action {
            EnvAction::Index(i) => *i,
            EnvAction::Vector(_) => panic!("tabular environment expects vertex actions"),
        };
        let cost = self.mdp.cost(s, a);
        let next = self.mdp.sample_next(s, a, rng.gen());
        (vec![next as f64], cost)
    }

    fn discount(&self) -> f64 {
        self.mdp.gamma
    }
}

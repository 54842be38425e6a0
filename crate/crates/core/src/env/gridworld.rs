//! Grid world with traps: an agent walks a `width x height` grid toward a
//! target, paying a unit cost per step and a surcharge for landing on a
//! trap. Reaching the target absorbs with zero further cost.

use crate::env::{ActionSpace, EnvAction, Environment};
use crate::error::Result;
use crate::mdp::TabularMdp;
use crate::rng::{stream_rng, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    pub n_traps: usize,
    pub step_cost: f64,
    pub trap_cost: f64,
    /// Trap placement depends only on this seed.
    pub env_seed: u64,
    pub gamma: f64,
    pub episode_cap: usize,
}

impl Default for GridWorldSpec {
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            n_traps: 10,
            step_cost: 1.0,
            trap_cost: 5.0,
            env_seed: 0,
            gamma: 0.99,
            episode_cap: 1000,
        }
    }
}

impl GridWorldSpec {
    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    /// Trap cells, a deterministic function of `env_seed`.
    pub fn traps(&self) -> Vec<usize> {
        let n = self.n_cells();
        let mut rng = stream_rng(self.env_seed, 0xC0FFEE);
        let mut cells: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates: the first n_traps entries are the traps
        for i in 0..self.n_traps.min(n) {
            let j = rng.gen_range(i..n);
            cells.swap(i, j);
        }
        let mut traps = cells[..self.n_traps.min(n)].to_vec();
        traps.sort_unstable();
        traps
    }
}

/// The four cardinal moves, clamped at the walls.
fn step_cell(width: usize, height: usize, cell: usize, action: usize) -> usize {
    let (x, y) = (cell % width, cell / width);
    let (nx, ny) = match action {
        0 => ((x + 1).min(width - 1), y),
        1 => (x.saturating_sub(1), y),
        2 => (x, (y + 1).min(height - 1)),
        _ => (x, y.saturating_sub(1)),
    };
    ny * width + nx
}

/// Enumerates `(agent, target)` pairs into a tabular MDP. States are
/// `agent * n_cells + target`; transitions are deterministic; a state with
/// `agent == target` self-loops at zero cost.
pub fn gridworld_to_tabular(spec: &GridWorldSpec) -> Result<TabularMdp> {
    let n_cells = spec.n_cells();
    let n_states = n_cells * n_cells;
    let traps = spec.traps();
    let is_trap = |c: usize| traps.binary_search(&c).is_ok();
    let mut cost = vec![0.0; n_states * 4];
    let mut rows: Vec<Vec<(u32, f64)>> = Vec::with_capacity(n_states * 4);
    for agent in 0..n_cells {
        for target in 0..n_cells {
            let s = agent * n_cells + target;
            for a in 0..4 {
                if agent == target {
                    rows.push(vec![(s as u32, 1.0)]);
                    continue;
                }
                let next_agent = step_cell(spec.width, spec.height, agent, a);
                let next = next_agent * n_cells + target;
                rows.push(vec![(next as u32, 1.0)]);
                let trap_hit = next_agent != target && is_trap(next_agent);
                cost[s * 4 + a] =
                    spec.step_cost + if trap_hit { spec.trap_cost } else { 0.0 };
            }
        }
    }
    TabularMdp::from_sparse(n_states, 4, spec.gamma, cost, rows)
}

/// Sampled grid world. The state vector is
/// `[agent_x, agent_y, target_x, target_y]` scaled to `[0, 1]`, which is
/// what the kernel feature maps consume.
pub struct GridWorldEnv {
    pub spec: GridWorldSpec,
    traps: Vec<usize>,
}

impl GridWorldEnv {
    pub fn new(spec: GridWorldSpec) -> Self {
        let traps = spec.traps();
        Self { spec, traps }
    }

    fn encode(&self, agent: usize, target: usize) -> Vec<f64> {
        let w = self.spec.width as f64;
        let h = self.spec.height as f64;
        vec![
            (agent % self.spec.width) as f64 / (w - 1.0).max(1.0),
            (agent / self.spec.width) as f64 / (h - 1.0).max(1.0),
            (target % self.spec.width) as f64 / (w - 1.0).max(1.0),
            (target / self.spec.width) as f64 / (h - 1.0).max(1.0),
        ]
    }

    fn decode(&self, state: &[f64]) -> (usize, usize) {
        let w = self.spec.width;
        let h = self.spec.height;
        let ax = (state[0] * (w - 1) as f64).round() as usize;
        let ay = (state[1] * (h - 1) as f64).round() as usize;
        let tx = (state[2] * (w - 1) as f64).round() as usize;
        let ty = (state[3] * (h - 1) as f64).round() as usize;
        (ay * w + ax, ty * w + tx)
    }

    fn is_trap(&self, cell: usize) -> bool {
        self.traps.binary_search(&cell).is_ok()
    }
}

impl Environment for GridWorldEnv {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Finite(4)
    }

    fn cost_bound(&self) -> f64 {
        self.spec.step_cost + self.spec.trap_cost
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let n = self.spec.n_cells();
        // targets avoid trap cells; the agent may start anywhere else
        let target = loop {
            let c = rng.gen_range(0..n);
            if !self.is_trap(c) {
                break c;
            }
        };
        let agent = loop {
            let c = rng.gen_range(0..n);
            if c != target {
                break c;
            }
        };
        self.encode(agent, target)
    }

    fn step(&self, state: &[f64], action: &EnvAction, _rng: &mut Rng) -> (Vec<f64>, f64) {
        let (agent, target) = self.decode(state);
        if agent == target {
            return (state.to_vec(), 0.0);
        }
        let a = match action {
            EnvAction::Index(i) => *i,
            EnvAction::Vector(_) => panic!("grid world expects vertex actions"),
        };
        let next_agent = step_cell(self.spec.width, self.spec.height, agent, a);
        let trap_hit = next_agent != target && self.is_trap(next_agent);
        let cost = self.spec.step_cost + if trap_hit { self.spec.trap_cost } else { 0.0 };
        (self.encode(next_agent, target), cost)
    }

    fn is_absorbing(&self, state: &[f64]) -> bool {
        let (agent, target) = self.decode(state);
        agent == target
    }

    fn discount(&self) -> f64 {
        self.spec.gamma
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Regularizer;
    use crate::mdp::value_iteration;

    #[test]
    fn target_state_is_absorbing_and_free() {
        let spec = GridWorldSpec { width: 4, height: 4, n_traps: 2, ..Default::default() };
        let mdp = gridworld_to_tabular(&spec).unwrap();
        let n_cells = spec.n_cells();
        let s = 5 * n_cells + 5; // agent on target
        for a in 0..4 {
            assert_eq!(mdp.cost(s, a), 0.0);
            assert_eq!(mdp.transition_row(s, a), &[(s as u32, 1.0)]);
        }
    }

    #[test]
    fn trap_landing_costs_step_plus_trap() {
        let spec = GridWorldSpec {
            width: 4,
            height: 4,
            n_traps: 3,
            env_seed: 1,
            ..Default::default()
        };
        let traps = spec.traps();
        let mdp = gridworld_to_tabular(&spec).unwrap();
        let trap = traps[0];
        // find a neighbor cell that moves onto the trap
        let (tx, ty) = (trap % 4, trap / 4);
        if tx > 0 {
            let agent = ty * 4 + (tx - 1);
            let target = (0..16).find(|&c| c != agent && c != trap).unwrap();
            let s = agent * 16 + target;
            assert_eq!(mdp.cost(s, 0), 6.0); // +x move onto the trap
        }
    }

    #[test]
    fn adjacent_target_without_traps_has_unit_value() {
        let spec = GridWorldSpec {
            width: 5,
            height: 5,
            n_traps: 0,
            gamma: 0.99,
            ..Default::default()
        };
        let mdp = gridworld_to_tabular(&spec).unwrap();
        let (v, _) = value_iteration(&mdp, &Regularizer::null(), 1e-10).unwrap();
        let n_cells = 25;
        let agent = 7;
        let target = 8; // one step to the right
        assert!((v[agent * n_cells + target] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn optimal_values_match_manhattan_distance_without_traps() {
        // BFS shortest-path oracle: with no traps the optimal discounted
        // cost is sum_{t<d} gamma^t for Manhattan distance d.
        let spec = GridWorldSpec {
            width: 5,
            height: 5,
            n_traps: 0,
            gamma: 0.99,
            ..Default::default()
        };
        let mdp = gridworld_to_tabular(&spec).unwrap();
        let (v, _) = value_iteration(&mdp, &Regularizer::null(), 1e-10).unwrap();
        for agent in 0..25usize {
            for target in 0..25usize {
                let d = ((agent % 5) as i64 - (target % 5) as i64).unsigned_abs()
                    + ((agent / 5) as i64 - (target / 5) as i64).unsigned_abs();
                let expect = (1.0 - spec.gamma.powi(d as i32)) / (1.0 - spec.gamma);
                assert!(
                    (v[agent * 25 + target] - expect).abs() < 1e-7,
                    "agent {agent} target {target}"
                );
            }
        }
    }

    #[test]
    fn traps_depend_only_on_env_seed() {
        let a = GridWorldSpec { env_seed: 3, ..Default::default() }.traps();
        let b = GridWorldSpec { env_seed: 3, ..Default::default() }.traps();
        let c = GridWorldSpec { env_seed: 4, ..Default::default() }.traps();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn env_reset_never_places_target_on_trap() {
        let env = GridWorldEnv::new(GridWorldSpec { env_seed: 7, ..Default::default() });
        let mut rng = crate::rng::stream_rng(1, 0);
        for _ in 0..200 {
            let s = env.reset(&mut rng);
            let (agent, target) = env.decode(&s);
            assert_ne!(agent, target);
            assert!(!env.is_trap(target));
        }
    }

    #[test]
    fn env_steps_match_tabular_export() {
        let spec = GridWorldSpec {
            width: 4,
            height: 4,
            n_traps: 3,
            env_seed: 11,
            ..Default::default()
        };
        let env = GridWorldEnv::new(spec.clone());
        let mdp = gridworld_to_tabular(&spec).unwrap();
        let mut rng = crate::rng::stream_rng(2, 0);
        for _ in 0..100 {
            let state = env.reset(&mut rng);
            let (agent, target) = env.decode(&state);
            let s = agent * 16 + target;
            for a in 0..4 {
                let (next, cost) = env.step(&state, &EnvAction::Index(a), &mut rng);
                let (na, nt) = env.decode(&next);
                assert_eq!(mdp.cost(s, a), cost);
                assert_eq!(mdp.transition_row(s, a), &[((na * 16 + nt) as u32, 1.0)]);
            }
        }
    }
}

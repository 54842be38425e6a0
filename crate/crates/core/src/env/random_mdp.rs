//! Random tabular MDP generator used as the substrate for rate checks.

use crate::error::Result;
use crate::mdp::TabularMdp;
use crate::rng::stream_rng;
use rand::Rng as _;

/// Mixing weight that keeps every generated chain ergodic under any policy.
const ERGODICITY_MIX: f64 = 1e-3;

/// Generates a random MDP: Dirichlet(1) transition rows (optionally
/// sparsified and renormalized), costs uniform on `[0, 1]`, and a small
/// uniform mixing term so every policy induces an ergodic chain.
pub fn random_tabular(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    sparsity: f64,
    seed: u64,
) -> Result<TabularMdp> {
    let mut rng = stream_rng(seed, 0);
    let mut cost = Vec::with_capacity(n_states * n_actions);
    let mut rows = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states * n_actions {
        cost.push(rng.gen::<f64>());
        // Dirichlet(1) row via normalized exponentials.
        let mut row: Vec<f64> =
            (0..n_states).map(|_| -(rng.gen::<f64>().max(1e-300)).ln()).collect();
        if sparsity > 0.0 && n_states > 1 {
            let keep_one = rng.gen_range(0..n_states);
            for (i, x) in row.iter_mut().enumerate() {
                if i != keep_one && rng.gen::<f64>() < sparsity {
                    *x = 0.0;
                }
            }
        }
        let total: f64 = row.iter().sum();
        let uniform = 1.0 / n_states as f64;
        let sparse: Vec<(u32, f64)> = row
            .iter()
            .enumerate()
            .map(|(sp, &x)| {
                (sp as u32, (1.0 - ERGODICITY_MIX) * x / total + ERGODICITY_MIX * uniform)
            })
            .collect();
        rows.push(sparse);
    }
    TabularMdp::from_sparse(n_states, n_actions, gamma, cost, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_rows_are_stochastic_and_mixed() {
        let mdp = random_tabular(7, 3, 0.9, 0.5, 42).unwrap();
        for s in 0..7 {
            for a in 0..3 {
                let row = mdp.transition_row(s, a);
                let sum: f64 = row.iter().map(|&(_, p)| p).sum();
                assert!((sum - 1.0).abs() < 1e-12);
                // the mixing term keeps every destination reachable
                assert_eq!(row.len(), 7);
                assert!(row.iter().all(|&(_, p)| p >= ERGODICITY_MIX / 7.0 - 1e-15));
            }
        }
    }

    #[test]
    fn same_seed_reproduces_same_mdp() {
        let a = random_tabular(5, 2, 0.9, 0.3, 9).unwrap();
        let b = random_tabular(5, 2, 0.9, 0.3, 9).unwrap();
        for s in 0..5 {
            for act in 0..2 {
                assert_eq!(a.cost(s, act), b.cost(s, act));
                assert_eq!(a.transition_row(s, act), b.transition_row(s, act));
            }
        }
    }
}

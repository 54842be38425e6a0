//! Tabular MDP representation, exact policy evaluation, advantage and
//! visitation machinery, oracle solvers, and stationarity diagnostics.
//!
//! Transitions are stored sparsely per `(state, action)` row so that
//! deterministic environments with large state spaces (the grid world
//! export) stay cheap; dense linear solves materialize the policy kernel
//! on demand and are capped at `MAX_DENSE_STATES`.

use crate::error::{Error, Result};
use crate::geometry::{BregmanGeometry, Regularizer, RegularizerKind};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Dense linear solves are refused beyond this state count.
pub const MAX_DENSE_STATES: usize = 10_000;

/// A randomized policy: one simplex row per state, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub n_states: usize,
    pub n_actions: usize,
    rows: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != n_states * n_actions {
            return Err(Error::InvalidInput("policy table shape mismatch".into()));
        }
        for s in 0..n_states {
            let row = &rows[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidInput(format!("negative probability in row {s}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "policy row {s} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { n_states, n_actions, rows })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            rows: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy placing all mass on `actions[s]`.
    pub fn greedy(n_states: usize, n_actions: usize, actions: &[usize]) -> Self {
        let mut rows = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            rows[s * n_actions + a] = 1.0;
        }
        Self { n_states, n_actions, rows }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.rows[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn set_row(&mut self, s: usize, row: &[f64]) {
        self.rows[s * self.n_actions..(s + 1) * self.n_actions].copy_from_slice(row);
    }

    pub fn rows_flat(&self) -> &[f64] {
        &self.rows
    }

    /// Largest per-state total-variation distance to `other`.
    pub fn tv_distance(&self, other: &PolicyTable) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.n_states {
            let tv: f64 = self
                .row(s)
                .iter()
                .zip(other.row(s))
                .map(|(&a, &b)| (a - b).abs())
                .sum::<f64>()
                / 2.0;
            worst = worst.max(tv);
        }
        worst
    }
}

/// Finite MDP with sparse transition rows, bounded costs, and a discount
/// factor in `[0, 1)`. Immutable after construction.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `cost[s * n_actions + a]`, each in `[0, c_bar]`.
    cost: Vec<f64>,
    /// Sparse rows `transition[s * n_actions + a] = [(s', p), ...]`.
    transition: Vec<Vec<(u32, f64)>>,
    /// Declared bound on the raw cost entries.
    pub c_bar: f64,
}

impl TabularMdp {
    /// Builds from dense row-major cost `[n_s x n_a]` and transition
    /// `[n_s x n_a x n_s]` arrays, validating stochasticity.
    pub fn from_dense(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        cost: Vec<f64>,
        transition: Vec<f64>,
    ) -> Result<Self> {
        if transition.len() != n_states * n_actions * n_states
            || cost.len() != n_states * n_actions
        {
            return Err(Error::InvalidInput("MDP array shape mismatch".into()));
        }
        let mut rows = Vec::with_capacity(n_states * n_actions);
        for sa in 0..n_states * n_actions {
            let slice = &transition[sa * n_states..(sa + 1) * n_states];
            let mut row = Vec::new();
            for (sp, &p) in slice.iter().enumerate() {
                if p < 0.0 {
                    return Err(Error::InvalidInput("negative transition probability".into()));
                }
                if p > 0.0 {
                    row.push((sp as u32, p));
                }
            }
            rows.push(row);
        }
        Self::from_sparse(n_states, n_actions, gamma, cost, rows)
    }

    pub fn from_sparse(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        cost: Vec<f64>,
        transition: Vec<Vec<(u32, f64)>>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidInput(format!("discount must be in [0,1), got {gamma}")));
        }
        if cost.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::InvalidInput("costs must be finite and nonnegative".into()));
        }
        if transition.len() != n_states * n_actions {
            return Err(Error::InvalidInput("transition row count mismatch".into()));
        }
        for (sa, row) in transition.iter().enumerate() {
            let sum: f64 = row.iter().map(|&(_, p)| p).sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "transition row {sa} sums to {sum}, expected 1 within 1e-12"
                )));
            }
            if row.iter().any(|&(sp, p)| p < 0.0 || sp as usize >= n_states) {
                return Err(Error::InvalidInput(format!("invalid entry in transition row {sa}")));
            }
        }
        let c_bar = cost.iter().cloned().fold(0.0f64, f64::max);
        Ok(Self { n_states, n_actions, gamma, cost, transition, c_bar })
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.n_actions + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[(u32, f64)] {
        &self.transition[s * self.n_actions + a]
    }

    /// Cost bound including the regularizer's range, so that
    /// `V in [0, effective_cost_bound / (1 - gamma)]`.
    pub fn effective_cost_bound(&self, reg: &Regularizer) -> f64 {
        self.c_bar + reg.sup_on_simplex(self.n_actions)
    }

    /// Policy-induced kernel `P^pi` as a dense row-stochastic matrix.
    pub fn policy_kernel(&self, pi: &PolicyTable) -> Result<DMatrix<f64>> {
        if self.n_states > MAX_DENSE_STATES {
            return Err(Error::InvalidInput(format!(
                "dense solve refused for {} states (cap {MAX_DENSE_STATES})",
                self.n_states
            )));
        }
        let n = self.n_states;
        let mut p = DMatrix::<f64>::zeros(n, n);
        for s in 0..n {
            let row = pi.row(s);
            for a in 0..self.n_actions {
                let w = row[a];
                if w == 0.0 {
                    continue;
                }
                for &(sp, prob) in self.transition_row(s, a) {
                    p[(s, sp as usize)] += w * prob;
                }
            }
        }
        Ok(p)
    }

    /// Expected one-step cost plus regularizer under `pi`:
    /// `c^pi(s) + h^{pi(s)}(s)`.
    pub fn policy_cost(&self, pi: &PolicyTable, reg: &Regularizer) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                let row = pi.row(s);
                let c: f64 = (0..self.n_actions).map(|a| row[a] * self.cost(s, a)).sum();
                c + reg.value(s, row)
            })
            .collect()
    }

    /// Samples a successor state for `(s, a)` from a uniform draw `u`.
    pub fn sample_next(&self, s: usize, a: usize, u: f64) -> usize {
        let mut acc = 0.0;
        let row = self.transition_row(s, a);
        for &(sp, p) in row {
            acc += p;
            if u < acc {
                return sp as usize;
            }
        }
        row.last().map(|&(sp, _)| sp as usize).unwrap_or(s)
    }
}

/// Dense JSON schema for [`TabularMdp`]: `{n_states, n_actions, gamma,
/// cost: row-major, transition: row-major}`.
#[derive(Serialize, Deserialize)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    cost: Vec<f64>,
    transition: Vec<f64>,
}

impl TabularMdp {
    pub fn to_json(&self) -> Result<String> {
        let n = self.n_states;
        let mut dense = vec![0.0; n * self.n_actions * n];
        for sa in 0..n * self.n_actions {
            for &(sp, p) in &self.transition[sa] {
                dense[sa * n + sp as usize] = p;
            }
        }
        Ok(serde_json::to_string(&MdpJson {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            cost: self.cost.clone(),
            transition: dense,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: MdpJson = serde_json::from_str(text)?;
        Self::from_dense(raw.n_states, raw.n_actions, raw.gamma, raw.cost, raw.transition)
    }
}

/// State values `V` and per-action values `Q0` for a fixed policy, with
/// `Q0(s, i) = c0(s, i) + h^{pi(s)}(s) + gamma * sum_s' P0(s'|s,i) V(s')`,
/// so that `<Q0(s), pi(s)> = V(s)`.
#[derive(Debug, Clone)]
pub struct ValueFunctions {
    pub v: Vec<f64>,
    /// Row-major `[n_states x n_actions]`.
    pub q0: Vec<f64>,
    n_actions: usize,
}

impl ValueFunctions {
    pub fn q0_row(&self, s: usize) -> &[f64] {
        &self.q0[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// Discounted state visitation measure from a point-mass start.
#[derive(Debug, Clone)]
pub struct VisitationMeasure {
    pub kappa: Vec<f64>,
    pub start: usize,
}

/// Exact policy evaluation: solves `(I - gamma P^pi) V = c^pi + h^pi` by LU
/// with partial pivoting, then assembles `Q0`. Warns through `log` if the
/// solve residual indicates conditioning beyond 1e12.
pub fn evaluate_exact(
    mdp: &TabularMdp,
    pi: &PolicyTable,
    reg: &Regularizer,
) -> Result<ValueFunctions> {
    let n = mdp.n_states;
    let p = mdp.policy_kernel(pi)?;
    let rhs_vec = mdp.policy_cost(pi, reg);
    let mut a = DMatrix::<f64>::identity(n, n);
    a -= p.scale(mdp.gamma);
    let b = DVector::from_vec(rhs_vec);
    let lu = a.clone().lu();
    let v = lu.solve(&b).ok_or_else(|| {
        Error::InvalidInput("singular evaluation system (impossible for gamma < 1)".into())
    })?;
    let residual = (&a * &v - &b).abs().max();
    let scale = b.abs().max().max(1.0);
    if residual > 1e-10 * scale {
        log::warn!("policy evaluation residual {residual:.3e} suggests conditioning beyond 1e12");
    }

    let mut q0 = vec![0.0; n * mdp.n_actions];
    for s in 0..n {
        let h_pi = reg.value(s, pi.row(s));
        for i in 0..mdp.n_actions {
            let mut fut = 0.0;
            for &(sp, prob) in mdp.transition_row(s, i) {
                fut += prob * v[sp as usize];
            }
            q0[s * mdp.n_actions + i] = mdp.cost(s, i) + h_pi + mdp.gamma * fut;
        }
    }
    Ok(ValueFunctions { v: v.data.into(), q0, n_actions: mdp.n_actions })
}

/// Advantage `psi^pi(s, a) = <Q0(s), a - pi(s)> + h^a(s) - h^{pi(s)}(s)`;
/// exactly zero at `a = pi(s)`.
pub fn advantage(
    vals: &ValueFunctions,
    reg: &Regularizer,
    pi: &PolicyTable,
    s: usize,
    a: &[f64],
) -> f64 {
    let q0 = vals.q0_row(s);
    let pi_s = pi.row(s);
    let lin: f64 = q0.iter().zip(a.iter().zip(pi_s)).map(|(&q, (&x, &p))| q * (x - p)).sum();
    lin + reg.value(s, a) - reg.value(s, pi_s)
}

/// Discounted visitation measure
/// `kappa = (1 - gamma) (I - gamma (P^pi)^T)^{-1} e_start`.
pub fn visitation(mdp: &TabularMdp, pi: &PolicyTable, start: usize) -> Result<VisitationMeasure> {
    let n = mdp.n_states;
    let p = mdp.policy_kernel(pi)?;
    let mut a = DMatrix::<f64>::identity(n, n);
    a -= p.transpose().scale(mdp.gamma);
    let mut e = DVector::<f64>::zeros(n);
    e[start] = 1.0 - mdp.gamma;
    let kappa = a
        .lu()
        .solve(&e)
        .ok_or_else(|| Error::InvalidInput("singular visitation system".into()))?;
    Ok(VisitationMeasure { kappa: kappa.data.into(), start })
}

/// Performance difference
/// `(1/(1-gamma)) * sum_q kappa_s^{pi'}(q) psi^pi(q, pi'(q))`,
/// which equals `V^{pi'}(s) - V^pi(s)` as an identity.
pub fn performance_difference(
    mdp: &TabularMdp,
    pi: &PolicyTable,
    pi_prime: &PolicyTable,
    reg: &Regularizer,
    s: usize,
) -> Result<f64> {
    let vals = evaluate_exact(mdp, pi, reg)?;
    let kappa = visitation(mdp, pi_prime, s)?;
    let mut total = 0.0;
    for q in 0..mdp.n_states {
        if kappa.kappa[q] == 0.0 {
            continue;
        }
        total += kappa.kappa[q] * advantage(&vals, reg, pi, q, pi_prime.row(q));
    }
    Ok(total / (1.0 - mdp.gamma))
}

/// Stationary distribution of `P^pi`: a direct solve of the fixed-point
/// system (machine-precision residual), falling back to power iteration
/// with a `1e-6` uniform damping when the chain is periodic or reducible.
pub fn stationary_distribution(mdp: &TabularMdp, pi: &PolicyTable) -> Result<Vec<f64>> {
    let p = mdp.policy_kernel(pi)?;
    if let Some(nu) = solve_stationary(&p) {
        return Ok(nu);
    }
    if let Some(nu) = power_iteration(&p, 200_000) {
        return Ok(nu);
    }
    let n = mdp.n_states;
    let damped = p.scale(1.0 - 1e-6) + DMatrix::<f64>::from_element(n, n, 1e-6 / n as f64);
    solve_stationary(&damped)
        .or_else(|| power_iteration(&damped, 800_000))
        .ok_or(Error::ConvergenceFailure {
            context: "stationary distribution".into(),
            iterations: 1_000_000,
            residual: f64::NAN,
            best: vec![],
        })
}

/// Solves `nu^T P = nu^T, sum nu = 1` directly by replacing one balance
/// equation with the normalization row.
fn solve_stationary(p: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let nu = a.lu().solve(&b)?;
    if nu.iter().any(|&x| x < -1e-9) {
        return None;
    }
    let mut v: Vec<f64> = nu.data.into();
    for x in &mut v {
        *x = x.max(0.0);
    }
    let z: f64 = v.iter().sum();
    for x in &mut v {
        *x /= z;
    }
    let nu = DVector::from_row_slice(&v);
    let res = (p.tr_mul(&nu) - &nu).abs().max();
    if res < 1e-12 {
        Some(v)
    } else {
        None
    }
}

fn power_iteration(p: &DMatrix<f64>, max_iters: usize) -> Option<Vec<f64>> {
    let n = p.nrows();
    let mut nu = DVector::<f64>::from_element(n, 1.0 / n as f64);
    for _ in 0..max_iters {
        let mut next = p.tr_mul(&nu);
        let sum = next.sum();
        next /= sum;
        let diff = (&next - &nu).abs().max();
        nu = next;
        if diff < 1e-15 {
            let res = (p.tr_mul(&nu) - &nu).abs().max();
            if res < 1e-12 {
                return Some(nu.data.into());
            }
        }
    }
    None
}

/// Scalar objective `f(pi) = sum_s weighting(s) V^pi(s)`.
pub fn objective_f(
    mdp: &TabularMdp,
    pi: &PolicyTable,
    reg: &Regularizer,
    weighting: &[f64],
) -> Result<f64> {
    let vals = evaluate_exact(mdp, pi, reg)?;
    Ok(weighting.iter().zip(&vals.v).map(|(&w, &v)| w * v).sum())
}

/// Per-state minimizer of `<g, a> + h^a(s)` over the simplex: the greedy
/// vertex for `Null`/concave regularizers (ties to the lowest index), the
/// closed-form softmax for KL regularizers, and the generic solver for
/// quadratics.
pub fn min_linear_plus_reg(g: &[f64], reg: &Regularizer, s: usize) -> Result<(Vec<f64>, f64)> {
    let n = g.len();
    match &reg.kind {
        RegularizerKind::Null | RegularizerKind::NegQuadratic { .. } => {
            // Linear (resp. concave) objective: a vertex attains the min,
            // and h vanishes at vertices for the concave surrogate.
            let mut best = 0usize;
            for i in 1..n {
                if g[i] < g[best] {
                    best = i;
                }
            }
            let mut a = vec![0.0; n];
            a[best] = 1.0;
            Ok((a, g[best]))
        }
        RegularizerKind::KlToAnchor { weight, anchor } => {
            if *weight == 0.0 {
                return min_linear_plus_reg(g, &Regularizer::null(), s);
            }
            let mut p = Vec::new();
            anchor.row(s, n, &mut p);
            let a = crate::geometry::argmin_linear_plus_kl(
                g,
                &[crate::geometry::KlTerm { coeff: *weight, anchor: &p }],
            );
            let lin: f64 = g.iter().zip(&a).map(|(&gi, &ai)| gi * ai).sum();
            Ok((a.clone(), lin + reg.value(s, &a)))
        }
        RegularizerKind::Quadratic { weight, .. } => {
            let gv = g.to_vec();
            let reg2 = reg.clone();
            let f = move |a: &[f64], grad: &mut [f64]| -> f64 {
                reg2.grad(s, a, grad);
                let mut val = reg2.value(s, a);
                for i in 0..a.len() {
                    val += gv[i] * a[i];
                    grad[i] += gv[i];
                }
                val
            };
            let set = crate::geometry::ActionSet::Simplex(n);
            let a = crate::geometry::prox_generic(
                &f,
                weight.max(1e-12),
                &set,
                1e-11,
                crate::geometry::PROX_GENERIC_MAX_ITERS,
            )?;
            let lin: f64 = g.iter().zip(&a).map(|(&gi, &ai)| gi * ai).sum();
            Ok((a.clone(), lin + reg.value(s, &a)))
        }
    }
}

/// Value iteration for the regularized Bellman operator
/// `V(s) = min_a { <c0(s,.) + gamma P0 V, a> + h^a(s) }`, run until the
/// implied sup-norm fixed-point error drops below `tol`. Returns the values
/// and the minimizing policy.
pub fn value_iteration(
    mdp: &TabularMdp,
    reg: &Regularizer,
    tol: f64,
) -> Result<(Vec<f64>, PolicyTable)> {
    let n = mdp.n_states;
    let m = mdp.n_actions;
    let mut v = vec![0.0; n];
    let mut g = vec![0.0; m];
    let max_sweeps = {
        // the contraction factor gives a predictable budget; pad generously
        let denom = if mdp.gamma > 0.0 { mdp.gamma.ln() } else { -1.0 };
        let bound = mdp.effective_cost_bound(reg).max(1.0) / (1.0 - mdp.gamma);
        (((tol / bound).ln() / denom).ceil() as usize + 16).max(64)
    };
    let mut pi = PolicyTable::uniform(n, m);
    for _ in 0..max_sweeps {
        let mut next = vec![0.0; n];
        let mut residual = 0.0f64;
        for s in 0..n {
            for (i, gi) in g.iter_mut().enumerate() {
                let mut fut = 0.0;
                for &(sp, prob) in mdp.transition_row(s, i) {
                    fut += prob * v[sp as usize];
                }
                *gi = mdp.cost(s, i) + mdp.gamma * fut;
            }
            let (row, val) = min_linear_plus_reg(&g, reg, s)?;
            pi.set_row(s, &row);
            next[s] = val;
            residual = residual.max((next[s] - v[s]).abs());
        }
        v = next;
        if residual * mdp.gamma / (1.0 - mdp.gamma) <= tol {
            break;
        }
    }
    Ok((v, pi))
}

/// One policy iteration step: the per-state exact minimizer of the
/// advantage, `argmin_a psi^{pi}(s, a)`.
pub fn policy_iteration_step(
    mdp: &TabularMdp,
    pi: &PolicyTable,
    reg: &Regularizer,
) -> Result<PolicyTable> {
    let vals = evaluate_exact(mdp, pi, reg)?;
    let mut next = PolicyTable::uniform(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        let (row, _) = min_linear_plus_reg(vals.q0_row(s), reg, s)?;
        next.set_row(s, &row);
    }
    Ok(next)
}

/// Residuals reported by [`stationarity_residual`]: the largest values over
/// the probe set.
#[derive(Debug, Clone, Copy)]
pub struct StationarityResidual {
    pub neg_advantage: f64,
    pub div_forward: f64,
    pub div_backward: f64,
}

/// Per-probe-state stationarity diagnostics for a step `pi_k -> pi_next`:
/// `-psi^{pi_k}(s, pi_next(s))`, `D(pi_k(s), pi_next(s))`, and
/// `D(pi_next(s), pi_k(s))`.
pub fn stationarity_residual_per_state(
    vals: &ValueFunctions,
    reg: &Regularizer,
    pi_k: &PolicyTable,
    pi_next: &PolicyTable,
    geom: &BregmanGeometry,
    probes: &[usize],
) -> Result<Vec<StationarityResidual>> {
    probes
        .iter()
        .map(|&s| {
            let neg_adv = -advantage(vals, reg, pi_k, s, pi_next.row(s));
            Ok(StationarityResidual {
                neg_advantage: neg_adv,
                div_forward: geom.divergence(pi_k.row(s), pi_next.row(s))?,
                div_backward: geom.divergence(pi_next.row(s), pi_k.row(s))?,
            })
        })
        .collect()
}

/// Max-aggregated stationarity residuals over the probe set.
pub fn stationarity_residual(
    vals: &ValueFunctions,
    reg: &Regularizer,
    pi_k: &PolicyTable,
    pi_next: &PolicyTable,
    geom: &BregmanGeometry,
    probes: &[usize],
) -> Result<StationarityResidual> {
    let per = stationarity_residual_per_state(vals, reg, pi_k, pi_next, geom, probes)?;
    Ok(StationarityResidual {
        neg_advantage: per.iter().map(|r| r.neg_advantage).fold(0.0, f64::max),
        div_forward: per.iter().map(|r| r.div_forward).fold(0.0, f64::max),
        div_backward: per.iter().map(|r| r.div_backward).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::random_tabular;
    use crate::rng::stream_rng;
    use rand::Rng as _;

    fn random_policy(rng: &mut crate::rng::Rng, n_states: usize, n_actions: usize) -> PolicyTable {
        let mut rows = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let mut row: Vec<f64> =
                (0..n_actions).map(|_| -(rng.gen::<f64>().max(1e-12)).ln()).collect();
            let s: f64 = row.iter().sum();
            for x in &mut row {
                *x /= s;
            }
            rows.extend(row);
        }
        PolicyTable::new(n_states, n_actions, rows).unwrap()
    }

    #[test]
    fn zero_cost_mdp_has_zero_values() {
        let mdp = TabularMdp::from_dense(
            2,
            2,
            0.9,
            vec![0.0; 4],
            vec![
                1.0, 0.0, 0.0, 1.0, // s0
                0.5, 0.5, 0.5, 0.5, // s1
            ],
        )
        .unwrap();
        let pi = PolicyTable::uniform(2, 2);
        let vals = evaluate_exact(&mdp, &pi, &Regularizer::null()).unwrap();
        assert!(vals.v.iter().all(|&v| v.abs() < 1e-14));
        assert!(vals.q0.iter().all(|&q| q.abs() < 1e-14));
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = TabularMdp::from_dense(1, 1, 0.75, vec![2.0], vec![1.0]).unwrap();
        let pi = PolicyTable::uniform(1, 1);
        let vals = evaluate_exact(&mdp, &pi, &Regularizer::null()).unwrap();
        assert!((vals.v[0] - 2.0 / 0.25).abs() < 1e-10);
    }

    #[test]
    fn exact_values_match_monte_carlo() {
        // 3-state/2-action random MDP against a truncated-horizon Monte
        // Carlo oracle within 3 standard errors.
        let mdp = random_tabular(3, 2, 0.9, 0.0, 99).unwrap();
        let mut rng = stream_rng(17, 0);
        let pi = random_policy(&mut rng, 3, 2);
        let vals = evaluate_exact(&mdp, &pi, &Regularizer::null()).unwrap();

        let n_rollouts = 1_000_000usize;
        let horizon = 500usize;
        let start = 0usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for r in 0..n_rollouts {
            let mut rr = stream_rng(18, r as u64);
            let mut s = start;
            let mut ret = 0.0;
            let mut disc = 1.0;
            for _ in 0..horizon {
                let u: f64 = rr.gen();
                let row = pi.row(s);
                let mut acc = 0.0;
                let mut a = 0;
                for (i, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        a = i;
                        break;
                    }
                }
                ret += disc * mdp.cost(s, a);
                disc *= mdp.gamma;
                s = mdp.sample_next(s, a, rr.gen());
            }
            sum += ret;
            sumsq += ret * ret;
        }
        let mean = sum / n_rollouts as f64;
        let var = (sumsq / n_rollouts as f64 - mean * mean).max(0.0);
        let se = (var / n_rollouts as f64).sqrt();
        let trunc_bias = mdp.gamma.powi(500) * mdp.c_bar / (1.0 - mdp.gamma);
        assert!(
            (vals.v[start] - mean).abs() <= 3.0 * se + trunc_bias + 1e-9,
            "V={} MC={} se={}",
            vals.v[start],
            mean,
            se
        );
    }

    #[test]
    fn advantage_is_zero_at_own_policy_and_linear_without_reg() {
        let mdp = random_tabular(4, 3, 0.9, 0.0, 5).unwrap();
        let mut rng = stream_rng(5, 1);
        let pi = random_policy(&mut rng, 4, 3);
        let reg = Regularizer::null();
        let vals = evaluate_exact(&mdp, &pi, &reg).unwrap();
        for s in 0..4 {
            assert_eq!(advantage(&vals, &reg, &pi, s, pi.row(s)), 0.0);
            // psi = <q0, a - pi(s)> when the regularizer is null
            let a = [1.0, 0.0, 0.0];
            let expect: f64 = vals
                .q0_row(s)
                .iter()
                .zip(a.iter().zip(pi.row(s)))
                .map(|(&q, (&x, &p))| q * (x - p))
                .sum();
            assert!((advantage(&vals, &reg, &pi, s, &a) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn optimal_policy_has_nonnegative_advantages() {
        let mdp = random_tabular(6, 3, 0.9, 0.0, 31).unwrap();
        let reg = Regularizer::null();
        let (_, pi_star) = value_iteration(&mdp, &reg, 1e-12).unwrap();
        let vals = evaluate_exact(&mdp, &pi_star, &reg).unwrap();
        for s in 0..6 {
            for i in 0..3 {
                let mut a = vec![0.0; 3];
                a[i] = 1.0;
                assert!(advantage(&vals, &reg, &pi_star, s, &a) >= -1e-9);
            }
        }
    }

    #[test]
    fn visitation_gamma_zero_is_point_mass() {
        let mdp = random_tabular(4, 2, 0.0, 0.0, 7).unwrap();
        let pi = PolicyTable::uniform(4, 2);
        let kappa = visitation(&mdp, &pi, 2).unwrap();
        assert!((kappa.kappa[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn visitation_absorbing_start_is_point_mass() {
        let mdp =
            TabularMdp::from_dense(2, 1, 0.9, vec![1.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let pi = PolicyTable::uniform(2, 1);
        let kappa = visitation(&mdp, &pi, 0).unwrap();
        assert!((kappa.kappa[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn visitation_matches_truncated_series_and_invariants() {
        let mdp = random_tabular(5, 3, 0.9, 0.0, 11).unwrap();
        let mut rng = stream_rng(11, 3);
        let pi = random_policy(&mut rng, 5, 3);
        let start = 1;
        let kappa = visitation(&mdp, &pi, start).unwrap();
        let sum: f64 = kappa.kappa.iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
        assert!(kappa.kappa[start] >= 1.0 - mdp.gamma - 1e-12);
        // truncated series oracle
        let p = mdp.policy_kernel(&pi).unwrap();
        let n = mdp.n_states;
        let mut dist = DVector::<f64>::zeros(n);
        dist[start] = 1.0;
        let mut acc = DVector::<f64>::zeros(n);
        let mut disc = 1.0;
        for _ in 0..=200 {
            acc += dist.scale(disc);
            dist = p.tr_mul(&dist);
            disc *= mdp.gamma;
        }
        acc *= 1.0 - mdp.gamma;
        for s in 0..n {
            assert!((kappa.kappa[s] - acc[s]).abs() < 1e-8);
        }
    }

    #[test]
    fn performance_difference_identity_and_monotonicity() {
        let mdp = random_tabular(8, 3, 0.9, 0.3, 21).unwrap();
        let mut rng = stream_rng(21, 0);
        let pi = random_policy(&mut rng, 8, 3);
        let pi2 = random_policy(&mut rng, 8, 3);
        let reg = Regularizer::null();
        // pi' = pi gives zero
        assert!(performance_difference(&mdp, &pi, &pi, &reg, 3).unwrap().abs() < 1e-12);
        // identity against the direct V difference
        let va = evaluate_exact(&mdp, &pi, &reg).unwrap();
        let vb = evaluate_exact(&mdp, &pi2, &reg).unwrap();
        for s in 0..8 {
            let lhs = performance_difference(&mdp, &pi, &pi2, &reg, s).unwrap();
            let rhs = vb.v[s] - va.v[s];
            assert!((lhs - rhs).abs() < 1e-9, "s={s}: {lhs} vs {rhs}");
        }
        // monotonicity identity under the optimal stationary distribution
        let (_, pi_star) = value_iteration(&mdp, &reg, 1e-13).unwrap();
        let nu = stationary_distribution(&mdp, &pi_star).unwrap();
        let vstar = evaluate_exact(&mdp, &pi_star, &reg).unwrap();
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for s in 0..8 {
            lhs += nu[s] * (-advantage(&va, &reg, &pi, s, pi_star.row(s)));
            rhs += nu[s] * (va.v[s] - vstar.v[s]);
        }
        rhs *= 1.0 - mdp.gamma;
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn value_iteration_reaches_bellman_fixed_point() {
        let mdp = random_tabular(10, 4, 0.95, 0.2, 3).unwrap();
        let reg = Regularizer::null();
        let (v, pi) = value_iteration(&mdp, &reg, 1e-12).unwrap();
        for s in 0..10 {
            let mut best = f64::INFINITY;
            for a in 0..4 {
                let mut q = mdp.cost(s, a);
                for &(sp, p) in mdp.transition_row(s, a) {
                    q += mdp.gamma * p * v[sp as usize];
                }
                best = best.min(q);
            }
            assert!((best - v[s]).abs() < 1e-10, "s={s}");
        }
        let bound = mdp.c_bar / (1.0 - mdp.gamma);
        assert!(v.iter().all(|&x| x >= -1e-12 && x <= bound + 1e-9));
        // the greedy policy evaluates back to the fixed-point values
        let vals = evaluate_exact(&mdp, &pi, &reg).unwrap();
        for s in 0..10 {
            assert!((vals.v[s] - v[s]).abs() < 1e-9);
        }
    }

    #[test]
    fn policy_iteration_contracts_and_fixes_optimum() {
        let reg = Regularizer::null();
        for trial in 0..50 {
            let mdp = random_tabular(6, 3, 0.8, 0.2, 100 + trial).unwrap();
            let (_, pi_star) = value_iteration(&mdp, &reg, 1e-13).unwrap();
            let nu = stationary_distribution(&mdp, &pi_star).unwrap();
            let f_star = objective_f(&mdp, &pi_star, &reg, &nu).unwrap();
            let mut pi = PolicyTable::uniform(6, 3);
            for _ in 0..30 {
                let f_k = objective_f(&mdp, &pi, &reg, &nu).unwrap();
                let next = policy_iteration_step(&mdp, &pi, &reg).unwrap();
                let f_next = objective_f(&mdp, &next, &reg, &nu).unwrap();
                if f_k - f_star > 1e-10 {
                    let ratio = (f_next - f_star) / (f_k - f_star);
                    assert!(ratio <= mdp.gamma + 1e-6, "trial {trial}: ratio {ratio}");
                }
                pi = next;
            }
            // fixed point: stepping from the optimum stays optimal
            let stepped = policy_iteration_step(&mdp, &pi_star, &reg).unwrap();
            let f_stepped = objective_f(&mdp, &stepped, &reg, &nu).unwrap();
            assert!((f_stepped - f_star).abs() < 1e-9);
        }
    }

    #[test]
    fn single_state_policy_iteration_is_one_step_optimal() {
        let mdp =
            TabularMdp::from_dense(1, 3, 0.5, vec![2.0, 1.0, 3.0], vec![1.0, 1.0, 1.0]).unwrap();
        let reg = Regularizer::null();
        let pi = PolicyTable::uniform(1, 3);
        let next = policy_iteration_step(&mdp, &pi, &reg).unwrap();
        assert_eq!(next.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn json_round_trip_is_deterministic() {
        let mdp = random_tabular(4, 2, 0.9, 0.5, 77).unwrap();
        let text = mdp.to_json().unwrap();
        let back = TabularMdp::from_json(&text).unwrap();
        let again = back.to_json().unwrap();
        assert_eq!(text, again);
        assert_eq!(mdp.n_states, back.n_states);
        for s in 0..4 {
            for a in 0..2 {
                assert_eq!(mdp.cost(s, a), back.cost(s, a));
                assert_eq!(mdp.transition_row(s, a), back.transition_row(s, a));
            }
        }
    }

    #[test]
    fn value_bound_holds_with_regularizer() {
        let mdp = random_tabular(5, 3, 0.9, 0.0, 13).unwrap();
        let reg =
            Regularizer::kl_to_anchor(0.5, crate::geometry::AnchorPolicy::Uniform, 1.0).unwrap();
        let mut rng = stream_rng(13, 0);
        let pi = random_policy(&mut rng, 5, 3);
        let vals = evaluate_exact(&mdp, &pi, &reg).unwrap();
        let bound = mdp.effective_cost_bound(&reg) / (1.0 - mdp.gamma);
        for &v in &vals.v {
            assert!(v >= -1e-12 && v <= bound + 1e-9);
        }
    }
}

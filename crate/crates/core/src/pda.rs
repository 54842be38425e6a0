//! Policy dual averaging: each iteration minimizes the weighted sum of all
//! past action-value functions plus a regularization term anchored at the
//! fixed initial policy,
//! `argmin_a { sum_{t<=k} beta_t [Q^{pi_t}(s, a) + h^a(s)] + lambda_k D(pi_0(s), a) }`.
//!
//! The accumulator is all the state the method carries: the beta-weighted
//! sum of per-action value tables (exact mode) or of fitted parameter
//! vectors over one shared feature map (function-approximation mode, valid
//! because evaluation is linear in the parameters). Policies are pure
//! functions of the accumulator and are recomputed on demand.

use crate::env::{ActionSpace, Environment};
use crate::error::{Error, Result};
use crate::eval::{
    embed_continuous, fit_ridge, median_heuristic, monte_carlo_score, sample_dataset,
    EvalSettings, ExplorationNoise, FeatureMap, FeatureSpec, KernelFeatures, PolicyAction, QModel,
    RidgeSetting, SampleConfig,
};
use crate::geometry::{
    argmin_linear_plus_kl, prox_generic, prox_simplex_tsallis, ActionSet, AnchorPolicy,
    BregmanGeometry, GeometryKind, KlTerm, Regularizer, RegularizerKind, PROX_GENERIC_MAX_ITERS,
};
use crate::mdp::{advantage, evaluate_exact, PolicyTable, TabularMdp};
use crate::pmd::{weighted_divergence, Oracle, TabularHooks};
use crate::rng::{stream_rng, substream};
use crate::schedule::PdaSchedule;
use crate::trace::TraceRow;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// Interior clamp used when reporting the entropy-geometry action-set
/// diameter (the raw diameter is unbounded on the open simplex).
pub const ENTROPY_DIAMETER_CLAMP: f64 = 1e-6;

/// Bregman diameter of the simplex under `geom`, used in the descent
/// correction term for increasing regularization weights. Entropy reports
/// the diameter of the `1e-6`-clamped interior.
pub fn simplex_diameter(geom: &BregmanGeometry) -> f64 {
    match geom.kind {
        GeometryKind::Euclidean => 1.0,
        GeometryKind::Entropy => (1.0 / ENTROPY_DIAMETER_CLAMP).ln(),
        GeometryKind::NegTsallis { .. } => f64::INFINITY,
    }
}

/// Exact-mode dual accumulator: `sum_t beta_t Q0^{pi_t}` with its total
/// weight. Snapshots are immutable; each step returns a new accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAccumulator {
    pub n_states: usize,
    pub n_actions: usize,
    pub acc_q: Vec<f64>,
    pub sum_beta: f64,
    pub k: usize,
}

impl DualAccumulator {
    pub fn empty(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, acc_q: vec![0.0; n_states * n_actions], sum_beta: 0.0, k: 0 }
    }

    pub fn push(&self, beta: f64, q0: &[f64]) -> Self {
        let mut acc_q = self.acc_q.clone();
        for (a, &q) in acc_q.iter_mut().zip(q0) {
            *a += beta * q;
        }
        Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            acc_q,
            sum_beta: self.sum_beta + beta,
            k: self.k + 1,
        }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.acc_q[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// Solves the per-state dual-averaging subproblem
/// `argmin_a { <g, a> + sum_beta * h^a(s) + lambda * D(anchor_row, a) }`.
pub fn pda_subproblem_row(
    g: &[f64],
    sum_beta: f64,
    lambda: f64,
    geom: &BregmanGeometry,
    reg: &Regularizer,
    s: usize,
    anchor_row: &[f64],
) -> Result<Vec<f64>> {
    let n = g.len();
    match geom.kind {
        GeometryKind::Entropy => match &reg.kind {
            RegularizerKind::Null => {
                Ok(argmin_linear_plus_kl(g, &[KlTerm { coeff: lambda, anchor: anchor_row }]))
            }
            RegularizerKind::KlToAnchor { weight, anchor } => {
                let mut p = Vec::new();
                anchor.row(s, n, &mut p);
                Ok(argmin_linear_plus_kl(
                    g,
                    &[
                        KlTerm { coeff: lambda, anchor: anchor_row },
                        KlTerm { coeff: sum_beta * weight, anchor: &p },
                    ],
                ))
            }
            _ => Err(Error::InvalidInput(
                "entropy dual-averaging subproblem supports Null or KlToAnchor regularizers"
                    .into(),
            )),
        },
        GeometryKind::NegTsallis { q } => {
            // lambda D_q(anchor, a) maps onto the Tsallis prox with
            // stepsize 1/lambda; the regularizer weight is scaled by the
            // accumulated beta sum.
            let scaled = scale_reg(reg, sum_beta)?;
            prox_simplex_tsallis(g, q, &scaled, s, 1.0 / lambda.max(1e-300), anchor_row)
        }
        GeometryKind::Euclidean => {
            let gv = g.to_vec();
            let anchor_v = anchor_row.to_vec();
            let reg2 = reg.clone();
            let f = move |a: &[f64], grad: &mut [f64]| -> f64 {
                reg2.grad(s, a, grad);
                let mut val = sum_beta * reg2.value(s, a);
                for i in 0..a.len() {
                    grad[i] *= sum_beta;
                    val += gv[i] * a[i] + 0.5 * lambda * (a[i] - anchor_v[i]) * (a[i] - anchor_v[i]);
                    grad[i] += gv[i] + lambda * (a[i] - anchor_v[i]);
                }
                val
            };
            let mu = (sum_beta * reg.mu_h + lambda).max(1e-12);
            let set = ActionSet::Simplex(n);
            prox_generic(&f, mu, &set, 1e-10, PROX_GENERIC_MAX_ITERS)
        }
    }
}

fn scale_reg(reg: &Regularizer, factor: f64) -> Result<Regularizer> {
    Ok(match &reg.kind {
        RegularizerKind::Null => Regularizer::null(),
        RegularizerKind::KlToAnchor { weight, anchor } => {
            Regularizer::kl_to_anchor(weight * factor, anchor.clone(), reg.m_h * factor)?
        }
        RegularizerKind::Quadratic { weight, anchor } => {
            Regularizer::quadratic(weight * factor, anchor.clone())?
        }
        RegularizerKind::NegQuadratic { weight } => Regularizer::neg_quadratic(weight * factor)?,
    })
}

/// One exact dual-averaging step: pushes `beta_k Q0^{pi_k}` into the
/// accumulator and recomputes the policy at every state.
pub fn pda_step_exact(
    mdp: &TabularMdp,
    acc: &DualAccumulator,
    vals_k: &crate::mdp::ValueFunctions,
    schedule: &PdaSchedule,
    k: usize,
    geom: &BregmanGeometry,
    reg: &Regularizer,
    pi0: &PolicyTable,
) -> Result<(DualAccumulator, PolicyTable)> {
    let next = acc.push(schedule.beta(k), &vals_k.q0);
    let lambda = schedule.lambda(k);
    let mut table = PolicyTable::uniform(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        let row =
            pda_subproblem_row(next.row(s), next.sum_beta, lambda, geom, reg, s, pi0.row(s))?;
        table.set_row(s, &row);
    }
    Ok((next, table))
}

/// Trace of an exact dual-averaging run.
#[derive(Debug, Clone)]
pub struct PdaExactRunTrace {
    pub rows: Vec<TraceRow>,
    pub v_history: Vec<Vec<f64>>,
    pub neg_psi: Vec<Vec<f64>>,
    pub div_forward: Vec<Vec<f64>>,
    pub div_backward: Vec<Vec<f64>>,
    /// Per-iteration descent correction
    /// `(lambda_k - lambda_{k-1}) / beta_k * diameter`.
    pub descent_correction: Vec<f64>,
    pub probe_states: Vec<usize>,
    pub final_policy: PolicyTable,
    pub final_accumulator: DualAccumulator,
}

/// Runs exact dual averaging for `schedule.k_max` iterations.
pub fn pda_run_exact(
    mdp: &TabularMdp,
    pi0: &PolicyTable,
    geom: &BregmanGeometry,
    reg: &Regularizer,
    schedule: &PdaSchedule,
    oracle: Option<&Oracle>,
    probe_states: Option<Vec<usize>>,
) -> Result<PdaExactRunTrace> {
    let owned;
    let oracle = match oracle {
        Some(o) => o,
        None => {
            owned = Oracle::compute(mdp, reg, 1e-12)?;
            &owned
        }
    };
    let probes = probe_states.unwrap_or_else(|| (0..mdp.n_states).collect());
    let diameter = simplex_diameter(geom);
    let mut acc = DualAccumulator::empty(mdp.n_states, mdp.n_actions);
    let mut pi = pi0.clone();
    let mut rows = Vec::with_capacity(schedule.k_max + 1);
    let mut v_history = Vec::with_capacity(schedule.k_max + 1);
    let mut neg_psi = Vec::new();
    let mut div_f = Vec::new();
    let mut div_b = Vec::new();
    let mut corrections = Vec::new();
    let mut running_min: Vec<f64> = vec![f64::INFINITY; probes.len()];
    let start = Instant::now();
    for k in 0..=schedule.k_max {
        let vals = evaluate_exact(mdp, &pi, reg)?;
        let f: f64 = oracle.nu_star.iter().zip(&vals.v).map(|(&w, &v)| w * v).sum();
        v_history.push(vals.v.clone());
        let mut row = TraceRow {
            iteration: k,
            f,
            gap: Some(f - oracle.f_star),
            d_to_opt: Some(weighted_divergence(geom, &pi, &oracle.pi_star, &oracle.nu_star)),
            min_neg_psi: None,
            varsigma_hat: None,
            sigma2_hat: None,
            episode_score: None,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        if k == schedule.k_max {
            rows.push(row);
            break;
        }
        let (next_acc, next_pi) = pda_step_exact(mdp, &acc, &vals, schedule, k, geom, reg, pi0)?;
        let lambda_prev = if k == 0 { schedule.lambda(0) } else { schedule.lambda(k - 1) };
        corrections.push((schedule.lambda(k) - lambda_prev) / schedule.beta(k) * diameter);
        let mut np = Vec::with_capacity(probes.len());
        let mut df = Vec::with_capacity(probes.len());
        let mut db = Vec::with_capacity(probes.len());
        for (idx, &s) in probes.iter().enumerate() {
            let neg = -advantage(&vals, reg, &pi, s, next_pi.row(s));
            np.push(neg);
            running_min[idx] = running_min[idx].min(neg);
            df.push(geom.divergence(pi.row(s), next_pi.row(s)).unwrap_or(f64::INFINITY));
            db.push(geom.divergence(next_pi.row(s), pi.row(s)).unwrap_or(f64::INFINITY));
        }
        row.min_neg_psi = Some(running_min.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        rows.push(row);
        neg_psi.push(np);
        div_f.push(df);
        div_b.push(db);
        acc = next_acc;
        pi = next_pi;
    }
    Ok(PdaExactRunTrace {
        rows,
        v_history,
        neg_psi,
        div_forward: div_f,
        div_backward: div_b,
        descent_correction: corrections,
        probe_states: probes,
        final_policy: pi,
        final_accumulator: acc,
    })
}

/// Function-approximation accumulator: the beta-weighted parameter sum
/// over one shared feature map (frozen at the first iteration so the
/// recursion never has to store per-iteration parameters).
#[derive(Debug, Clone)]
pub struct FaDualAccumulator {
    pub fmap: Arc<FeatureMap>,
    pub acc_theta: Vec<f64>,
    pub sum_beta: f64,
    pub k: usize,
    model: QModel,
}

impl FaDualAccumulator {
    pub fn new(fmap: Arc<FeatureMap>) -> Self {
        let acc_theta = vec![0.0; fmap.n_features()];
        let model = QModel::new(fmap.clone(), acc_theta.clone());
        Self { fmap, acc_theta, sum_beta: 0.0, k: 0, model }
    }

    /// Rebuilds the accumulator from a saved checkpoint.
    pub fn from_checkpoint(cp: &PdaCheckpoint) -> Self {
        let fmap = Arc::new(cp.fmap.clone());
        let model = QModel::new(fmap.clone(), cp.acc_theta.clone());
        Self { fmap, acc_theta: cp.acc_theta.clone(), sum_beta: cp.sum_beta, k: cp.k, model }
    }

    /// Pushes `beta_k theta_k`; returns a new snapshot.
    pub fn push(&self, beta: f64, theta: &[f64]) -> Self {
        let mut acc_theta = self.acc_theta.clone();
        for (a, &t) in acc_theta.iter_mut().zip(theta) {
            *a += beta * t;
        }
        let model = QModel::new(self.fmap.clone(), acc_theta.clone());
        Self {
            fmap: self.fmap.clone(),
            acc_theta,
            sum_beta: self.sum_beta + beta,
            k: self.k + 1,
            model,
        }
    }

    /// Accumulated model `sum_t beta_t Qtilde(.; theta_t)`.
    pub fn model(&self) -> &QModel {
        &self.model
    }
}

/// Resumable snapshot of a function-approximation dual-averaging run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdaCheckpoint {
    pub fmap: FeatureMap,
    pub acc_theta: Vec<f64>,
    pub sum_beta: f64,
    pub k: usize,
    pub schedule: PdaSchedule,
    pub anchor: AnchorPolicy,
    /// Parameters of the most recent single-iteration fit; seeds the
    /// bootstrap of the first resumed iteration.
    pub prev_theta: Option<Vec<f64>>,
}

impl PdaCheckpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// The finite-action accumulator policy: the per-state minimizer of the
/// accumulated subproblem; a pure function of `(accumulator, lambda, s)`.
pub fn accumulator_policy_finite(
    acc: &FaDualAccumulator,
    lambda: f64,
    reg: &Regularizer,
    state: &[f64],
    n_actions: usize,
    anchor_row: &[f64],
) -> Vec<f64> {
    if acc.k == 0 {
        return anchor_row.to_vec();
    }
    let g = acc.model().q0_vector(state, n_actions);
    let s_idx = state.first().map(|&x| x.max(0.0) as usize).unwrap_or(0);
    let geom = BregmanGeometry::entropy(n_actions);
    pda_subproblem_row(&g, acc.sum_beta, lambda, &geom, reg, s_idx, anchor_row)
        .expect("entropy subproblem on fitted accumulator")
}

/// The continuous accumulator policy: minimizes the accumulated model plus
/// regularization over the action set with the generic prox.
pub fn accumulator_policy_continuous(
    acc: &FaDualAccumulator,
    lambda: f64,
    modulus: f64,
    reg: &Regularizer,
    state: &[f64],
    set: &ActionSet,
    anchor_action: &[f64],
) -> Vec<f64> {
    if acc.k == 0 {
        return anchor_action.to_vec();
    }
    let model = acc.model().clone();
    let sum_beta = acc.sum_beta;
    let state_v = state.to_vec();
    let anchor = anchor_action.to_vec();
    let reg2 = reg.clone();
    let action_dim = set.dim();
    let f = move |a: &[f64], grad: &mut [f64]| -> f64 {
        let z = embed_continuous(&state_v, a);
        let mut qgrad = vec![0.0; a.len()];
        let mut val = model.evaluate_with_action_grad(&z, action_dim, &mut qgrad);
        let mut hgrad = vec![0.0; a.len()];
        reg2.grad(0, a, &mut hgrad);
        val += sum_beta * reg2.value(0, a);
        for i in 0..a.len() {
            val += 0.5 * lambda * (a[i] - anchor[i]) * (a[i] - anchor[i]);
            grad[i] = qgrad[i] + sum_beta * hgrad[i] + lambda * (a[i] - anchor[i]);
        }
        val
    };
    match prox_generic(&f, modulus.max(1e-9), set, 1e-8, PROX_GENERIC_MAX_ITERS) {
        Ok(a) => a,
        Err(Error::ConvergenceFailure { best, .. }) => best,
        Err(_) => anchor_action.to_vec(),
    }
}

/// Trace of a function-approximation dual-averaging run.
#[derive(Debug)]
pub struct PdaFaRunTrace {
    pub rows: Vec<TraceRow>,
    pub env_steps: u64,
    pub checkpoint: Option<PdaCheckpoint>,
    pub probe_neg_psi: Vec<Vec<f64>>,
    pub probe_div_forward: Vec<Vec<f64>>,
    pub probe_div_backward: Vec<Vec<f64>>,
}

impl PdaFaRunTrace {
    pub fn best_neg_psi_per_probe(&self) -> Vec<f64> {
        if self.probe_neg_psi.is_empty() {
            return vec![];
        }
        let n = self.probe_neg_psi[0].len();
        (0..n)
            .map(|i| self.probe_neg_psi.iter().map(|r| r[i]).fold(f64::INFINITY, f64::min))
            .collect()
    }
}

fn ridge_lambda(setting: &RidgeSetting, n_data: usize) -> f64 {
    match setting {
        RidgeSetting::Scaled(f) => f * n_data as f64,
        RidgeSetting::Absolute(a) => *a,
    }
}

/// Runs finite-action dual averaging with function approximation. Only the
/// plain action-value function is ever fitted; the stepsize parameters stay
/// out of the regression targets. The feature map freezes at the first
/// iteration (anchors from the first dataset) so the parameter sum remains
/// a faithful representation of the accumulated model.
#[allow(clippy::too_many_arguments)]
pub fn pda_run_finite_fa(
    env: &dyn Environment,
    reg: &Regularizer,
    schedule: &PdaSchedule,
    eval: &EvalSettings,
    seed: u64,
    hooks: Option<&TabularHooks<'_>>,
    score_episodes: usize,
    score_horizon: usize,
    score_every: usize,
    resume: Option<PdaCheckpoint>,
) -> Result<PdaFaRunTrace> {
    let n_actions = env
        .action_space()
        .n_finite()
        .ok_or_else(|| Error::InvalidInput("finite-action run on continuous space".into()))?;
    let uniform = vec![1.0 / n_actions as f64; n_actions];
    let mut acc: Option<FaDualAccumulator> = None;
    let mut start_k = 0usize;
    let mut prev_model: Option<(QModel, usize)> = None; // model and its iteration
    if let Some(cp) = resume {
        let fmap = Arc::new(cp.fmap);
        let mut a = FaDualAccumulator::new(fmap.clone());
        a.acc_theta = cp.acc_theta.clone();
        a.sum_beta = cp.sum_beta;
        a.k = cp.k;
        a.model = QModel::new(a.fmap.clone(), cp.acc_theta);
        start_k = cp.k;
        if let Some(theta) = cp.prev_theta {
            prev_model = Some((QModel::new(fmap, theta), cp.k.saturating_sub(1)));
        }
        acc = Some(a);
    }
    let mut rows = Vec::new();
    let mut env_steps = 0u64;
    let start = Instant::now();
    for k in start_k..schedule.k_max {
        let lambda_prev = if k == 0 { schedule.lambda(0) } else { schedule.lambda(k - 1) };
        // behavior policy pi_k from the accumulator snapshot
        let behavior_acc = acc.clone();
        let reg_b = reg.clone();
        let uni = uniform.clone();
        let behavior = move |s: &[f64]| -> PolicyAction {
            let row = match &behavior_acc {
                None => uni.clone(),
                Some(a) => {
                    accumulator_policy_finite(a, lambda_prev, &reg_b, s, n_actions, &uni)
                }
            };
            PolicyAction::Simplex(row)
        };
        let cfg = SampleConfig {
            n_samples: eval.samples_at(k),
            burn_in: eval.burn_in,
            truncation: eval.truncation,
            seed,
            stream: substream(1, k as u64),
        };
        let boot_model = prev_model.clone();
        let behavior2 = behavior.clone();
        let bootstrap = move |s: &[f64]| -> f64 {
            match &boot_model {
                None => 0.0,
                Some((m, _)) => {
                    let row = match behavior2(s) {
                        PolicyAction::Simplex(r) => r,
                        PolicyAction::Point(_) => unreachable!(),
                    };
                    m.q0_vector(s, n_actions).iter().zip(&row).map(|(&q, &p)| q * p).sum()
                }
            }
        };
        let ds = sample_dataset(
            env,
            &behavior,
            reg,
            &cfg,
            Some(&bootstrap),
            None,
            &format!("pda-{k}"),
        );
        env_steps += ds.env_steps;
        // freeze the feature map on the first fit
        let fmap = match &acc {
            Some(a) => a.fmap.clone(),
            None => match &eval.features {
                FeatureSpec::TabularOneHot { n_states } => Arc::new(FeatureMap::TabularOneHot {
                    n_states: *n_states,
                    n_actions,
                }),
                FeatureSpec::Kernel { sigma, n_frequencies, n_anchors } => {
                    let sigma = sigma.unwrap_or_else(|| median_heuristic(&ds.z));
                    let z_dim = ds.z.first().map(|z| z.len()).unwrap_or(1);
                    let n = (*n_anchors).min(ds.z.len());
                    let mut anchors = Vec::with_capacity(n * z_dim);
                    for z in ds.z.iter().take(n) {
                        anchors.extend_from_slice(z);
                    }
                    Arc::new(FeatureMap::Kernel(KernelFeatures::new(
                        seed ^ 0xFA,
                        sigma,
                        *n_frequencies,
                        z_dim,
                        anchors,
                    )))
                }
            },
        };
        let model = if eval.exact_targets {
            let h = hooks.ok_or_else(|| {
                Error::InvalidInput("exact targets require a tabular oracle".into())
            })?;
            let table = materialize_finite(&acc, lambda_prev, reg, h.mdp.n_states, n_actions)?;
            let vals = evaluate_exact(h.mdp, &table, reg)?;
            let exact = exact_dataset(h.mdp, &vals);
            fit_ridge(&exact, fmap.clone(), ridge_lambda(&eval.ridge, exact.y.len()))?
        } else {
            fit_ridge(&ds, fmap.clone(), ridge_lambda(&eval.ridge, ds.y.len()))?
        };
        let next_acc = match &acc {
            Some(a) => a.push(schedule.beta(k), &model.theta),
            None => FaDualAccumulator::new(fmap.clone()).push(schedule.beta(k), &model.theta),
        };
        prev_model = Some((model, k));
        acc = Some(next_acc);
        // trace row: exact objective when hooked, sampled score otherwise
        let lambda_k = schedule.lambda(k);
        let (f, gap) = match hooks {
            Some(h) => {
                let table =
                    materialize_finite(&acc, lambda_k, reg, h.mdp.n_states, n_actions)?;
                let vals = evaluate_exact(h.mdp, &table, reg)?;
                let f: f64 = h.oracle.nu_star.iter().zip(&vals.v).map(|(&w, &v)| w * v).sum();
                (f, Some(f - h.oracle.f_star))
            }
            None => (f64::NAN, None),
        };
        let episode_score = if score_episodes > 0
            && (k % score_every.max(1) == 0 || k + 1 == schedule.k_max)
        {
            let score_acc = acc.clone();
            let reg_s = reg.clone();
            let uni2 = uniform.clone();
            let score_policy = move |s: &[f64]| -> PolicyAction {
                let row = match &score_acc {
                    None => uni2.clone(),
                    Some(a) => {
                        accumulator_policy_finite(a, lambda_k, &reg_s, s, n_actions, &uni2)
                    }
                };
                PolicyAction::Simplex(row)
            };
            let (score, steps) = monte_carlo_score(
                env,
                &score_policy,
                score_episodes,
                score_horizon,
                seed,
                substream(9, k as u64),
            );
            env_steps += steps;
            Some(score)
        } else {
            None
        };
        rows.push(TraceRow {
            iteration: k,
            f: if f.is_nan() { episode_score.unwrap_or(f64::NAN) } else { f },
            gap,
            d_to_opt: None,
            min_neg_psi: None,
            varsigma_hat: None,
            sigma2_hat: None,
            episode_score,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let checkpoint = acc.as_ref().map(|a| PdaCheckpoint {
        fmap: a.fmap.as_ref().clone(),
        acc_theta: a.acc_theta.clone(),
        sum_beta: a.sum_beta,
        k: a.k,
        schedule: schedule.clone(),
        anchor: AnchorPolicy::Uniform,
        prev_theta: prev_model.as_ref().map(|(m, _)| m.theta.clone()),
    });
    Ok(PdaFaRunTrace {
        rows,
        env_steps,
        checkpoint,
        probe_neg_psi: vec![],
        probe_div_forward: vec![],
        probe_div_backward: vec![],
    })
}

fn materialize_finite(
    acc: &Option<FaDualAccumulator>,
    lambda: f64,
    reg: &Regularizer,
    n_states: usize,
    n_actions: usize,
) -> Result<PolicyTable> {
    let uniform = vec![1.0 / n_actions as f64; n_actions];
    let mut rows = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        let state = [s as f64];
        let row = match acc {
            None => uniform.clone(),
            Some(a) => accumulator_policy_finite(a, lambda, reg, &state, n_actions, &uniform),
        };
        rows.extend(row);
    }
    PolicyTable::new(n_states, n_actions, rows)
}

fn exact_dataset(mdp: &TabularMdp, vals: &crate::mdp::ValueFunctions) -> crate::eval::EvalDataset {
    let mut z = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    let mut y = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    for s in 0..mdp.n_states {
        let q0 = vals.q0_row(s);
        for a in 0..mdp.n_actions {
            z.push(crate::eval::embed_finite(&[s as f64], a, mdp.n_actions));
            y.push(q0[a]);
        }
    }
    crate::eval::EvalDataset {
        z,
        y,
        meta: crate::eval::EvalDatasetMeta {
            burn_in: 0,
            truncation: 0,
            n_samples: mdp.n_states * mdp.n_actions,
            policy_id: "exact".into(),
        },
        env_steps: 0,
    }
}

/// Runs continuous-action dual averaging with function approximation and
/// decaying Gaussian exploration: the behavior policy adds zero-mean noise
/// with covariance `I / sqrt(t)` (projected back to the action set) at
/// iteration `t`, counted from one.
#[allow(clippy::too_many_arguments)]
pub fn pda_run_continuous(
    env: &dyn Environment,
    reg: &Regularizer,
    schedule: &PdaSchedule,
    eval: &EvalSettings,
    seed: u64,
    n_probe_states: usize,
    score_episodes: usize,
    score_horizon: usize,
    score_every: usize,
) -> Result<PdaFaRunTrace> {
    let set = match env.action_space() {
        ActionSpace::Continuous(s) => s,
        ActionSpace::Finite(_) => {
            return Err(Error::InvalidInput("continuous run on finite action space".into()))
        }
    };
    let geom = BregmanGeometry::euclidean(set.dim());
    let anchor_action = set.center();
    let mu_d = schedule.curvature.mu_d();
    let mut probe_rng = stream_rng(seed, substream(7, 1));
    let probes: Vec<Vec<f64>> = (0..n_probe_states).map(|_| env.reset(&mut probe_rng)).collect();
    let mut acc: Option<FaDualAccumulator> = None;
    let mut rows = Vec::new();
    let mut probe_np = Vec::new();
    let mut probe_df = Vec::new();
    let mut probe_db = Vec::new();
    let mut env_steps = 0u64;
    let start = Instant::now();
    for k in 0..schedule.k_max {
        let lambda_prev = if k == 0 { schedule.lambda(0) } else { schedule.lambda(k - 1) };
        let modulus_prev = (mu_d * acc.as_ref().map(|a| a.sum_beta).unwrap_or(0.0)
            + lambda_prev)
            .max(1e-9);
        let behavior_acc = acc.clone();
        let reg_b = reg.clone();
        let set_b = set.clone();
        let anchor_b = anchor_action.clone();
        let behavior = move |s: &[f64]| -> PolicyAction {
            let a = match &behavior_acc {
                None => anchor_b.clone(),
                Some(acc) => accumulator_policy_continuous(
                    acc,
                    lambda_prev,
                    modulus_prev,
                    &reg_b,
                    s,
                    &set_b,
                    &anchor_b,
                ),
            };
            PolicyAction::Point(a)
        };
        // exploration covariance I / sqrt(t), t counted from 1
        let noise = ExplorationNoise {
            covariance_scale: 1.0 / ((k + 1) as f64).sqrt(),
            set: set.clone(),
        };
        let cfg = SampleConfig {
            n_samples: eval.samples_at(k),
            burn_in: eval.burn_in,
            truncation: eval.truncation,
            seed,
            stream: substream(2, k as u64),
        };
        let ds = sample_dataset(
            env,
            &behavior,
            reg,
            &cfg,
            None,
            Some(&noise),
            &format!("pda-cont-{k}"),
        );
        env_steps += ds.env_steps;
        let fmap = match &acc {
            Some(a) => a.fmap.clone(),
            None => match &eval.features {
                FeatureSpec::Kernel { sigma, n_frequencies, n_anchors } => {
                    let sigma = sigma.unwrap_or_else(|| median_heuristic(&ds.z));
                    let z_dim = ds.z.first().map(|z| z.len()).unwrap_or(1);
                    let n = (*n_anchors).min(ds.z.len());
                    let mut anchors = Vec::with_capacity(n * z_dim);
                    for z in ds.z.iter().take(n) {
                        anchors.extend_from_slice(z);
                    }
                    Arc::new(FeatureMap::Kernel(KernelFeatures::new(
                        seed ^ 0xFB,
                        sigma,
                        *n_frequencies,
                        z_dim,
                        anchors,
                    )))
                }
                FeatureSpec::TabularOneHot { .. } => {
                    return Err(Error::InvalidInput("continuous runs need kernel features".into()))
                }
            },
        };
        let model = fit_ridge(&ds, fmap.clone(), ridge_lambda(&eval.ridge, ds.y.len()))?;
        let next_acc = match &acc {
            Some(a) => a.push(schedule.beta(k), &model.theta),
            None => FaDualAccumulator::new(fmap.clone()).push(schedule.beta(k), &model.theta),
        };
        let lambda_k = schedule.lambda(k);
        let modulus_k = (mu_d * next_acc.sum_beta + lambda_k).max(1e-9);
        // surrogate stationarity residuals at the probes, using this
        // iteration's plain value model
        let mut np = Vec::with_capacity(probes.len());
        let mut df = Vec::with_capacity(probes.len());
        let mut db = Vec::with_capacity(probes.len());
        for p in &probes {
            let a_k = match &acc {
                None => anchor_action.clone(),
                Some(a) => accumulator_policy_continuous(
                    a,
                    lambda_prev,
                    modulus_prev,
                    reg,
                    p,
                    &set,
                    &anchor_action,
                ),
            };
            let a_next = accumulator_policy_continuous(
                &next_acc,
                lambda_k,
                modulus_k,
                reg,
                p,
                &set,
                &anchor_action,
            );
            let zk = embed_continuous(p, &a_k);
            let zn = embed_continuous(p, &a_next);
            let psi_hat = model.evaluate(&zn) + reg.value(0, &a_next)
                - model.evaluate(&zk)
                - reg.value(0, &a_k);
            np.push(-psi_hat);
            df.push(geom.divergence(&a_k, &a_next).unwrap_or(f64::INFINITY));
            db.push(geom.divergence(&a_next, &a_k).unwrap_or(f64::INFINITY));
        }
        probe_np.push(np);
        probe_df.push(df);
        probe_db.push(db);
        acc = Some(next_acc);
        // noiseless evaluation episodes, thinned to every score_every-th
        // iteration (policy solves during scoring are not free)
        let score = if score_episodes > 0
            && (k % score_every.max(1) == 0 || k + 1 == schedule.k_max)
        {
            let score_acc = acc.clone().unwrap();
            let reg_s = reg.clone();
            let set_s = set.clone();
            let anchor_s = anchor_action.clone();
            let score_policy = move |s: &[f64]| -> PolicyAction {
                PolicyAction::Point(accumulator_policy_continuous(
                    &score_acc,
                    lambda_k,
                    modulus_k,
                    &reg_s,
                    s,
                    &set_s,
                    &anchor_s,
                ))
            };
            let (score, steps) = monte_carlo_score(
                env,
                &score_policy,
                score_episodes,
                score_horizon,
                seed,
                substream(3, k as u64),
            );
            env_steps += steps;
            Some(score)
        } else {
            None
        };
        let worst_best = {
            let n = probes.len();
            (0..n)
                .map(|i| probe_np.iter().map(|r: &Vec<f64>| r[i]).fold(f64::INFINITY, f64::min))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        rows.push(TraceRow {
            iteration: k,
            f: score.unwrap_or(f64::NAN),
            gap: None,
            d_to_opt: None,
            min_neg_psi: Some(worst_best),
            varsigma_hat: None,
            sigma2_hat: None,
            episode_score: score,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let checkpoint = acc.as_ref().map(|a| PdaCheckpoint {
        fmap: a.fmap.as_ref().clone(),
        acc_theta: a.acc_theta.clone(),
        sum_beta: a.sum_beta,
        k: a.k,
        schedule: schedule.clone(),
        anchor: AnchorPolicy::Constant(anchor_action.clone()),
        prev_theta: None,
    });
    Ok(PdaFaRunTrace {
        rows,
        env_steps,
        checkpoint,
        probe_neg_psi: probe_np,
        probe_div_forward: probe_df,
        probe_div_backward: probe_db,
    })
}

//! Stochastic policy evaluation: rollout sampling, Monte Carlo value
//! targets with bootstrapping, random-feature linear models, ridge
//! regression, and evaluation-error diagnostics.
//!
//! A sample point is a state-action pair `z = (s, a)` with the action
//! embedded as a simplex vertex (finite actions) or the raw action vector
//! (continuous actions). Kernel features approximate a Gaussian kernel
//! between `z` and a set of anchor points through random Fourier
//! frequencies; the feature value of anchor `i` is
//! `psi_i(z) = (1/D) sum_j cos(omega_j . (zeta_i - z))`, which lies in
//! `[-1, 1]` and is symmetric in `(z, zeta_i)` exactly.

use crate::env::{EnvAction, Environment};
use crate::error::{Error, Result};
use crate::geometry::{ActionSet, Regularizer};
use crate::rng::{stream_rng, substream, Rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Random-Fourier-feature map against fixed anchors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "KernelFeaturesSer", into = "KernelFeaturesSer")]
pub struct KernelFeatures {
    pub sigma: f64,
    pub n_frequencies: usize,
    pub z_dim: usize,
    pub seed: u64,
    /// Row-major `D x z_dim` frequency matrix, `omega_j ~ N(0, sigma^-2 I)`.
    omega: Vec<f64>,
    /// Row-major `N x z_dim` anchor points.
    anchors: Vec<f64>,
    /// Cached `cos/sin(omega_j . zeta_i)`, row-major `N x D`.
    cos_a: Vec<f64>,
    sin_a: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct KernelFeaturesSer {
    sigma: f64,
    n_frequencies: usize,
    z_dim: usize,
    seed: u64,
    anchors: Vec<f64>,
}

impl From<KernelFeaturesSer> for KernelFeatures {
    fn from(s: KernelFeaturesSer) -> Self {
        KernelFeatures::new(s.seed, s.sigma, s.n_frequencies, s.z_dim, s.anchors)
    }
}

impl From<KernelFeatures> for KernelFeaturesSer {
    fn from(k: KernelFeatures) -> Self {
        KernelFeaturesSer {
            sigma: k.sigma,
            n_frequencies: k.n_frequencies,
            z_dim: k.z_dim,
            seed: k.seed,
            anchors: k.anchors,
        }
    }
}

/// Internal stream id for frequency generation.
const FREQ_STREAM: u64 = 0xFEA7;

impl KernelFeatures {
    /// Frequencies are regenerated deterministically from `(seed, sigma,
    /// n_frequencies, z_dim)`; anchors are supplied by the caller (the
    /// first `N` dataset points by convention).
    pub fn new(
        seed: u64,
        sigma: f64,
        n_frequencies: usize,
        z_dim: usize,
        anchors: Vec<f64>,
    ) -> Self {
        let mut rng = stream_rng(seed, FREQ_STREAM);
        let mut omega = vec![0.0; n_frequencies * z_dim];
        for w in &mut omega {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = z / sigma.max(1e-12);
        }
        let n_anchors = anchors.len() / z_dim;
        let mut cos_a = vec![0.0; n_anchors * n_frequencies];
        let mut sin_a = vec![0.0; n_anchors * n_frequencies];
        for i in 0..n_anchors {
            let zeta = &anchors[i * z_dim..(i + 1) * z_dim];
            for j in 0..n_frequencies {
                let dot: f64 = omega[j * z_dim..(j + 1) * z_dim]
                    .iter()
                    .zip(zeta)
                    .map(|(&w, &x)| w * x)
                    .sum();
                cos_a[i * n_frequencies + j] = dot.cos();
                sin_a[i * n_frequencies + j] = dot.sin();
            }
        }
        Self { sigma, n_frequencies, z_dim, seed, omega, anchors, cos_a, sin_a }
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len() / self.z_dim
    }

    fn phases(&self, z: &[f64], cos_b: &mut [f64], sin_b: &mut [f64]) {
        let d = self.n_frequencies;
        for j in 0..d {
            let dot: f64 = self.omega[j * self.z_dim..(j + 1) * self.z_dim]
                .iter()
                .zip(z)
                .map(|(&w, &x)| w * x)
                .sum();
            cos_b[j] = dot.cos();
            sin_b[j] = dot.sin();
        }
    }
}

/// Median pairwise distance over (at most) the first 256 points; the
/// default bandwidth heuristic.
pub fn median_heuristic(zs: &[Vec<f64>]) -> f64 {
    let n = zs.len().min(256);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = zs[i]
                .iter()
                .zip(&zs[j])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dists.push(d);
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2].max(1e-6)
}

/// Feature map kinds backing [`QModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FeatureMap {
    Kernel(KernelFeatures),
    /// Exact tabular representation: one feature per `(state, action)`.
    TabularOneHot { n_states: usize, n_actions: usize },
}

impl FeatureMap {
    pub fn n_features(&self) -> usize {
        match self {
            FeatureMap::Kernel(k) => k.n_anchors(),
            FeatureMap::TabularOneHot { n_states, n_actions } => n_states * n_actions,
        }
    }

    pub fn z_dim(&self) -> usize {
        match self {
            FeatureMap::Kernel(k) => k.z_dim,
            FeatureMap::TabularOneHot { n_actions, .. } => 1 + n_actions,
        }
    }

    /// Writes the feature vector of `z` into `out`.
    pub fn features(&self, z: &[f64], out: &mut [f64]) {
        match self {
            FeatureMap::Kernel(k) => {
                let d = k.n_frequencies;
                let mut cos_b = vec![0.0; d];
                let mut sin_b = vec![0.0; d];
                k.phases(z, &mut cos_b, &mut sin_b);
                for (i, o) in out.iter_mut().enumerate() {
                    let ca = &k.cos_a[i * d..(i + 1) * d];
                    let sa = &k.sin_a[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += ca[j] * cos_b[j] + sa[j] * sin_b[j];
                    }
                    *o = acc / d as f64;
                }
            }
            FeatureMap::TabularOneHot { n_states, n_actions } => {
                out.fill(0.0);
                let s = z[0].round() as usize;
                let a = onehot_argmax(&z[1..1 + n_actions]);
                if s < *n_states {
                    out[s * n_actions + a] = 1.0;
                }
            }
        }
    }

    /// Dense design matrix for a batch of sample points.
    pub fn design_matrix(&self, zs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = zs.len();
        let m = self.n_features();
        match self {
            FeatureMap::Kernel(k) => {
                let d = k.n_frequencies;
                let mut cos_b = DMatrix::<f64>::zeros(n, d);
                let mut sin_b = DMatrix::<f64>::zeros(n, d);
                let mut cb = vec![0.0; d];
                let mut sb = vec![0.0; d];
                for (l, z) in zs.iter().enumerate() {
                    k.phases(z, &mut cb, &mut sb);
                    for j in 0..d {
                        cos_b[(l, j)] = cb[j];
                        sin_b[(l, j)] = sb[j];
                    }
                }
                let cos_a = DMatrix::<f64>::from_row_slice(k.n_anchors(), d, &k.cos_a);
                let sin_a = DMatrix::<f64>::from_row_slice(k.n_anchors(), d, &k.sin_a);
                (cos_b * cos_a.transpose() + sin_b * sin_a.transpose()).scale(1.0 / d as f64)
            }
            FeatureMap::TabularOneHot { .. } => {
                let mut phi = DMatrix::<f64>::zeros(n, m);
                let mut row = vec![0.0; m];
                for (l, z) in zs.iter().enumerate() {
                    self.features(z, &mut row);
                    for (c, &v) in row.iter().enumerate() {
                        if v != 0.0 {
                            phi[(l, c)] = v;
                        }
                    }
                }
                phi
            }
        }
    }
}

fn onehot_argmax(emb: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in emb.iter().enumerate() {
        if v > emb[best] {
            best = i;
        }
    }
    best
}

/// Builds the sample point `z` from a state and a finite action index.
pub fn embed_finite(state: &[f64], action: usize, n_actions: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(state.len() + n_actions);
    z.extend_from_slice(state);
    for i in 0..n_actions {
        z.push(if i == action { 1.0 } else { 0.0 });
    }
    z
}

/// Builds the sample point `z` from a state and a continuous action.
pub fn embed_continuous(state: &[f64], action: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(state.len() + action.len());
    z.extend_from_slice(state);
    z.extend_from_slice(action);
    z
}

/// Per-frequency weight combination `p_j = sum_i theta_i cos(A_ij)`,
/// `r_j = sum_i theta_i sin(A_ij)`, making model evaluation `O(D)` after an
/// `O(D z_dim)` phase computation.
#[derive(Debug, Clone)]
struct Compiled {
    p: Vec<f64>,
    r: Vec<f64>,
}

/// A linear-in-weights action-value model over a feature map. Immutable
/// and cheap to share across threads.
#[derive(Debug, Clone)]
pub struct QModel {
    pub fmap: Arc<FeatureMap>,
    pub theta: Vec<f64>,
    compiled: Option<Compiled>,
}

impl QModel {
    pub fn new(fmap: Arc<FeatureMap>, theta: Vec<f64>) -> Self {
        let compiled = match fmap.as_ref() {
            FeatureMap::Kernel(k) => {
                let d = k.n_frequencies;
                let mut p = vec![0.0; d];
                let mut r = vec![0.0; d];
                for (i, &t) in theta.iter().enumerate() {
                    if t == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        p[j] += t * k.cos_a[i * d + j];
                        r[j] += t * k.sin_a[i * d + j];
                    }
                }
                Some(Compiled { p, r })
            }
            FeatureMap::TabularOneHot { .. } => None,
        };
        Self { fmap, theta, compiled }
    }

    pub fn zeros(fmap: Arc<FeatureMap>) -> Self {
        let n = fmap.n_features();
        Self::new(fmap, vec![0.0; n])
    }

    /// Model value at a sample point.
    pub fn evaluate(&self, z: &[f64]) -> f64 {
        match self.fmap.as_ref() {
            FeatureMap::Kernel(k) => {
                let c = self.compiled.as_ref().expect("kernel model is compiled");
                let d = k.n_frequencies;
                let mut acc = 0.0;
                for j in 0..d {
                    let dot: f64 = k.omega[j * k.z_dim..(j + 1) * k.z_dim]
                        .iter()
                        .zip(z)
                        .map(|(&w, &x)| w * x)
                        .sum();
                    acc += c.p[j] * dot.cos() + c.r[j] * dot.sin();
                }
                acc / d as f64
            }
            FeatureMap::TabularOneHot { n_states, n_actions } => {
                let s = z[0].round() as usize;
                let a = onehot_argmax(&z[1..1 + n_actions]);
                if s < *n_states {
                    self.theta[s * n_actions + a]
                } else {
                    0.0
                }
            }
        }
    }

    /// Value and gradient with respect to the trailing `action_dim`
    /// coordinates of `z` (the action block).
    pub fn evaluate_with_action_grad(&self, z: &[f64], action_dim: usize, grad: &mut [f64]) -> f64 {
        match self.fmap.as_ref() {
            FeatureMap::Kernel(k) => {
                let c = self.compiled.as_ref().expect("kernel model is compiled");
                let d = k.n_frequencies;
                let ds = k.z_dim - action_dim;
                grad.fill(0.0);
                let mut acc = 0.0;
                for j in 0..d {
                    let wrow = &k.omega[j * k.z_dim..(j + 1) * k.z_dim];
                    let dot: f64 = wrow.iter().zip(z).map(|(&w, &x)| w * x).sum();
                    let (sin_d, cos_d) = dot.sin_cos();
                    acc += c.p[j] * cos_d + c.r[j] * sin_d;
                    let slope = -c.p[j] * sin_d + c.r[j] * cos_d;
                    for l in 0..action_dim {
                        grad[l] += slope * wrow[ds + l];
                    }
                }
                for g in grad.iter_mut() {
                    *g /= d as f64;
                }
                acc / d as f64
            }
            FeatureMap::TabularOneHot { .. } => {
                grad.fill(0.0);
                self.evaluate(z)
            }
        }
    }

    /// Per-action values `[Q(s, e_0), ..., Q(s, e_{m-1})]` for a finite
    /// action space.
    pub fn q0_vector(&self, state: &[f64], n_actions: usize) -> Vec<f64> {
        (0..n_actions)
            .map(|a| self.evaluate(&embed_finite(state, a, n_actions)))
            .collect()
    }

    /// Weighted sum of models sharing one feature map (weights apply to
    /// the parameter vectors; valid because evaluation is linear in the
    /// parameters).
    pub fn accumulate(models: &[(f64, &QModel)], fmap: Arc<FeatureMap>) -> QModel {
        let n = fmap.n_features();
        let mut theta = vec![0.0; n];
        for (w, m) in models {
            for (t, &x) in theta.iter_mut().zip(&m.theta) {
                *t += w * x;
            }
        }
        QModel::new(fmap, theta)
    }
}

/// Feature-map construction recipe for function-approximation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureSpec {
    Kernel {
        /// Bandwidth; `None` applies the median heuristic on the first
        /// dataset.
        sigma: Option<f64>,
        n_frequencies: usize,
        n_anchors: usize,
    },
    TabularOneHot {
        n_states: usize,
    },
}

/// Ridge regularization: either scaled with the dataset size (default
/// `lambda = 1e-3 * n_data`) or an absolute value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RidgeSetting {
    Scaled(f64),
    Absolute(f64),
}

impl Default for RidgeSetting {
    fn default() -> Self {
        RidgeSetting::Scaled(1e-3)
    }
}

/// Evaluation configuration shared by the function-approximation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_samples: usize,
    /// Larger first-iteration sample count, useful because kernel anchors
    /// are harvested from the first dataset.
    #[serde(default)]
    pub n_samples_first: Option<usize>,
    pub burn_in: usize,
    pub truncation: usize,
    pub ridge: RidgeSetting,
    pub features: FeatureSpec,
    /// Replace sampling with exhaustive exact targets (tabular oracle
    /// substrates only); the zero-noise regime.
    pub exact_targets: bool,
}

impl EvalSettings {
    pub fn samples_at(&self, k: usize) -> usize {
        if k == 0 {
            self.n_samples_first.unwrap_or(self.n_samples)
        } else {
            self.n_samples
        }
    }
}

/// Metadata attached to an evaluation dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalDatasetMeta {
    pub burn_in: usize,
    pub truncation: usize,
    pub n_samples: usize,
    pub policy_id: String,
}

/// Sampled regression data: `z_i = (s_i, a_i)` with Monte Carlo value
/// targets `y_i`.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub z: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub meta: EvalDatasetMeta,
    /// Environment steps consumed while collecting the dataset.
    pub env_steps: u64,
}

impl EvalDataset {
    /// Dumps as CSV with columns `z0..z{d-1}, y`.
    pub fn to_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.z.first().map(|z| z.len()).unwrap_or(0);
        let mut header: Vec<String> = (0..d).map(|i| format!("z{i}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (z, y) in self.z.iter().zip(&self.y) {
            let mut rec: Vec<String> = z.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv(path: &std::path::Path, meta: EvalDatasetMeta) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut z = Vec::new();
        let mut y = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Serde(e.to_string())))
                .collect::<Result<_>>()?;
            let (last, front) = vals.split_last().ok_or_else(|| {
                Error::Serde("empty dataset record".into())
            })?;
            z.push(front.to_vec());
            y.push(*last);
        }
        Ok(Self { z, y, meta, env_steps: 0 })
    }
}

/// What a behavior policy prescribes at a state.
#[derive(Debug, Clone)]
pub enum PolicyAction {
    /// Distribution over finite actions; the rollout samples a vertex.
    Simplex(Vec<f64>),
    /// Deterministic continuous action.
    Point(Vec<f64>),
}

/// Behavior policy used by rollouts; implementations must be thread-safe
/// because samples are collected in parallel.
pub trait RolloutPolicy: Sync {
    fn policy_at(&self, state: &[f64]) -> PolicyAction;
}

impl<F: Fn(&[f64]) -> PolicyAction + Sync> RolloutPolicy for F {
    fn policy_at(&self, state: &[f64]) -> PolicyAction {
        self(state)
    }
}

/// Gaussian exploration noise with covariance `scale * I`, projected back
/// to the action set.
#[derive(Clone)]
pub struct ExplorationNoise {
    pub covariance_scale: f64,
    pub set: ActionSet,
}

/// Sampling configuration for [`sample_dataset`].
#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub burn_in: usize,
    pub truncation: usize,
    pub seed: u64,
    /// High bits of the per-sample substream (typically the iteration).
    pub stream: u64,
}

fn sample_policy_action(
    action: &PolicyAction,
    noise: Option<&ExplorationNoise>,
    rng: &mut Rng,
) -> EnvAction {
    match action {
        PolicyAction::Simplex(p) => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut idx = p.len() - 1;
            for (i, &pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            EnvAction::Index(idx)
        }
        PolicyAction::Point(a) => {
            let mut v = a.clone();
            if let Some(n) = noise {
                let std = n.covariance_scale.sqrt();
                for x in &mut v {
                    let z: f64 = StandardNormal.sample(rng);
                    *x += std * z;
                }
                v = n.set.project(&v);
            }
            EnvAction::Vector(v)
        }
    }
}

fn regularizer_at(reg: &Regularizer, state: &[f64], action: &PolicyAction) -> f64 {
    if reg.is_null() {
        return 0.0;
    }
    let point = match action {
        PolicyAction::Simplex(p) => p.as_slice(),
        PolicyAction::Point(a) => a.as_slice(),
    };
    // Table anchors are only meaningful for tabular states, whose index
    // rides in state[0]; other anchors ignore the index.
    let s_idx = state.first().map(|&x| x.max(0.0) as usize).unwrap_or(0);
    reg.value(s_idx, point)
}

/// One Monte Carlo sample: mixes the chain for `burn_in` steps from a
/// reset, probes a uniformly random action, then rolls the policy out for
/// `truncation` steps, bootstrapping the tail with `bootstrap` (skipped
/// when the episode absorbs, where the tail is exactly zero).
#[allow(clippy::too_many_arguments)]
fn collect_one(
    env: &dyn Environment,
    policy: &dyn RolloutPolicy,
    reg: &Regularizer,
    cfg: &SampleConfig,
    bootstrap: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
    noise: Option<&ExplorationNoise>,
    index: usize,
) -> (Vec<f64>, f64, u64) {
    let mut rng = stream_rng(cfg.seed, substream(cfg.stream, index as u64));
    let gamma = env.discount();
    let mut steps = 0u64;
    let mut state = env.reset(&mut rng);
    for _ in 0..cfg.burn_in {
        if env.is_absorbing(&state) {
            break;
        }
        let act = sample_policy_action(&policy.policy_at(&state), noise, &mut rng);
        state = env.step(&state, &act, &mut rng).0;
        steps += 1;
    }
    // probe action drawn uniformly over the action space
    let probe = env.action_space().sample_uniform(&mut rng);
    let z = match &probe {
        EnvAction::Index(a) => {
            let n = env.action_space().n_finite().expect("finite space");
            embed_finite(&state, *a, n)
        }
        EnvAction::Vector(a) => embed_continuous(&state, a),
    };
    let mut y = 0.0;
    let mut disc = 1.0;
    let mut s = state.clone();
    let mut absorbed = env.is_absorbing(&s);
    for t in 0..cfg.truncation {
        if absorbed {
            break;
        }
        let (act, h) = if t == 0 {
            // the regularizer is charged at the policy's own distribution
            (probe.clone(), regularizer_at(reg, &s, &policy.policy_at(&s)))
        } else {
            let pa = policy.policy_at(&s);
            let h = regularizer_at(reg, &s, &pa);
            (sample_policy_action(&pa, noise, &mut rng), h)
        };
        let (next, cost) = env.step(&s, &act, &mut rng);
        steps += 1;
        y += disc * (cost + h);
        disc *= gamma;
        s = next;
        absorbed = env.is_absorbing(&s);
    }
    if !absorbed {
        if let Some(b) = bootstrap {
            y += disc * b(&s);
        }
    }
    (z, y, steps)
}

/// Collects an evaluation dataset; parallel across samples when the
/// `parallel` feature is on. Per-sample substreams make the result
/// identical to [`sample_dataset_seq`] regardless of thread count.
#[allow(clippy::too_many_arguments)]
pub fn sample_dataset(
    env: &dyn Environment,
    policy: &dyn RolloutPolicy,
    reg: &Regularizer,
    cfg: &SampleConfig,
    bootstrap: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
    noise: Option<&ExplorationNoise>,
    policy_id: &str,
) -> EvalDataset {
    #[cfg(feature = "parallel")]
    {
        let rows: Vec<(Vec<f64>, f64, u64)> = (0..cfg.n_samples)
            .into_par_iter()
            .map(|i| collect_one(env, policy, reg, cfg, bootstrap, noise, i))
            .collect();
        assemble_dataset(rows, cfg, policy_id)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sample_dataset_seq(env, policy, reg, cfg, bootstrap, noise, policy_id)
    }
}

/// Sequential reference implementation of [`sample_dataset`].
#[allow(clippy::too_many_arguments)]
pub fn sample_dataset_seq(
    env: &dyn Environment,
    policy: &dyn RolloutPolicy,
    reg: &Regularizer,
    cfg: &SampleConfig,
    bootstrap: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
    noise: Option<&ExplorationNoise>,
    policy_id: &str,
) -> EvalDataset {
    let rows: Vec<(Vec<f64>, f64, u64)> = (0..cfg.n_samples)
        .map(|i| collect_one(env, policy, reg, cfg, bootstrap, noise, i))
        .collect();
    assemble_dataset(rows, cfg, policy_id)
}

fn assemble_dataset(
    rows: Vec<(Vec<f64>, f64, u64)>,
    cfg: &SampleConfig,
    policy_id: &str,
) -> EvalDataset {
    let mut z = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    let mut steps = 0u64;
    for (zi, yi, si) in rows {
        z.push(zi);
        y.push(yi);
        steps += si;
    }
    EvalDataset {
        z,
        y,
        meta: EvalDatasetMeta {
            burn_in: cfg.burn_in,
            truncation: cfg.truncation,
            n_samples: cfg.n_samples,
            policy_id: policy_id.to_string(),
        },
        env_steps: steps,
    }
}

/// Mean discounted episode cost of a policy (no exploration noise),
/// truncated at `horizon`. Returns `(mean, env_steps)`.
pub fn monte_carlo_score(
    env: &dyn Environment,
    policy: &dyn RolloutPolicy,
    episodes: usize,
    horizon: usize,
    seed: u64,
    stream: u64,
) -> (f64, u64) {
    #[cfg(feature = "parallel")]
    {
        let rows: Vec<(f64, u64)> = (0..episodes)
            .into_par_iter()
            .map(|e| score_episode(env, policy, horizon, seed, substream(stream, e as u64)))
            .collect();
        let total: f64 = rows.iter().map(|r| r.0).sum();
        let steps: u64 = rows.iter().map(|r| r.1).sum();
        (total / episodes.max(1) as f64, steps)
    }
    #[cfg(not(feature = "parallel"))]
    {
        monte_carlo_score_seq(env, policy, episodes, horizon, seed, stream)
    }
}

/// Sequential reference implementation of [`monte_carlo_score`].
pub fn monte_carlo_score_seq(
    env: &dyn Environment,
    policy: &dyn RolloutPolicy,
    episodes: usize,
    horizon: usize,
    seed: u64,
    stream: u64,
) -> (f64, u64) {
    let rows: Vec<(f64, u64)> = (0..episodes)
        .map(|e| score_episode(env, policy, horizon, seed, substream(stream, e as u64)))
        .collect();
    let total: f64 = rows.iter().map(|r| r.0).sum();
    let steps: u64 = rows.iter().map(|r| r.1).sum();
    (total / episodes.max(1) as f64, steps)
}

fn score_episode(
    env: &dyn Environment,
    policy: &dyn RolloutPolicy,
    horizon: usize,
    seed: u64,
    stream: u64,
) -> (f64, u64) {
    let mut rng = stream_rng(seed, stream);
    let gamma = env.discount();
    let mut s = env.reset(&mut rng);
    let mut ret = 0.0;
    let mut disc = 1.0;
    let mut steps = 0u64;
    for _ in 0..horizon {
        if env.is_absorbing(&s) {
            break;
        }
        let act = sample_policy_action(&policy.policy_at(&s), None, &mut rng);
        let (next, cost) = env.step(&s, &act, &mut rng);
        steps += 1;
        ret += disc * cost;
        disc *= gamma;
        s = next;
    }
    (ret, steps)
}

/// Ridge regression `theta = argmin |Phi theta - y|^2 + lambda |theta|^2`
/// via the normal equations and a Cholesky solve; a degenerate Gram matrix
/// is handled by growing the diagonal shift. Deterministic given the
/// dataset.
pub fn fit_ridge(dataset: &EvalDataset, fmap: Arc<FeatureMap>, ridge_lambda: f64) -> Result<QModel> {
    if ridge_lambda < 0.0 {
        return Err(Error::InvalidInput("ridge parameter must be nonnegative".into()));
    }
    let phi = fmap.design_matrix(&dataset.z);
    let yv = DVector::from_row_slice(&dataset.y);
    let gram = phi.transpose() * &phi;
    let rhs = phi.transpose() * &yv;
    let m = gram.nrows();
    let mut shift = ridge_lambda;
    let theta = loop {
        let mut sys = gram.clone();
        for i in 0..m {
            sys[(i, i)] += shift;
        }
        if let Some(chol) = sys.clone().cholesky() {
            let theta = chol.solve(&rhs);
            let residual = (&sys * &theta - &rhs).abs().max();
            if residual <= 1e-8 * rhs.abs().max().max(1.0) {
                break theta;
            }
        }
        // degenerate or ill-conditioned Gram: grow the shift
        shift = if shift == 0.0 { 1e-12 } else { shift * 10.0 };
        if shift > 1e6 {
            return Err(Error::ConvergenceFailure {
                context: "ridge normal equations".into(),
                iterations: 0,
                residual: f64::NAN,
                best: vec![],
            });
        }
    };
    Ok(QModel::new(fmap, theta.data.into()))
}

/// Ridge objective value (used by the fit-quality invariant tests).
pub fn ridge_objective(dataset: &EvalDataset, model: &QModel, ridge_lambda: f64) -> f64 {
    let mut loss = 0.0;
    for (z, &y) in dataset.z.iter().zip(&dataset.y) {
        let e = model.evaluate(z) - y;
        loss += e * e;
    }
    loss + ridge_lambda * model.theta.iter().map(|&t| t * t).sum::<f64>()
}

/// The two fitted components of the mirror-descent surrogate: the
/// action-value model and the scaled mirror-map term
/// `grad omega(pi_k(s)) / eta_k`, kept separate so the stepsize never
/// contaminates the value regression target scale.
#[derive(Debug, Clone)]
pub struct AugmentedModel {
    pub q: QModel,
    pub grad: GradOmegaModel,
    pub eta: f64,
}

/// Representation of the fitted mirror-map term.
#[derive(Debug, Clone)]
pub enum GradOmegaModel {
    /// Joint-feature model probed at action vertices (finite actions).
    Joint(QModel),
    /// One state-feature model per action component (continuous actions).
    PerComponent(Vec<QModel>),
}

impl AugmentedModel {
    /// The per-action surrogate vector
    /// `Ltilde_0(s) = Qtilde_0(s) - grad_omega_tilde(s)`, whose entropy
    /// prox against `omega` reproduces the divergence-anchored step.
    pub fn l0_vector(&self, state: &[f64], n_actions: usize) -> Vec<f64> {
        let q = self.q.q0_vector(state, n_actions);
        match &self.grad {
            GradOmegaModel::Joint(g) => {
                let gv = g.q0_vector(state, n_actions);
                q.iter().zip(&gv).map(|(&a, &b)| a - b).collect()
            }
            GradOmegaModel::PerComponent(models) => q
                .iter()
                .enumerate()
                .map(|(i, &a)| a - models[i].evaluate(state))
                .collect(),
        }
    }

    /// Continuous surrogate `Ltilde(s, a) = Qtilde(s, a) - <gtilde(s), a>`
    /// and its action gradient.
    pub fn l_value_grad(&self, state: &[f64], action: &[f64], grad_out: &mut [f64]) -> f64 {
        let z = embed_continuous(state, action);
        let mut val = self.q.evaluate_with_action_grad(&z, action.len(), grad_out);
        match &self.grad {
            GradOmegaModel::PerComponent(models) => {
                for (l, m) in models.iter().enumerate() {
                    let g = m.evaluate(state);
                    val -= g * action[l];
                    grad_out[l] -= g;
                }
            }
            GradOmegaModel::Joint(_) => unreachable!("joint grad model is finite-action only"),
        }
        val
    }
}

/// Fits the augmented surrogate for finite actions: the value component by
/// ridge on the Monte Carlo targets, the mirror-map component by ridge on
/// the exact targets `grad omega(pi_k(s))_i / eta_k` at visited states
/// (computable exactly, so this component carries approximation error
/// only).
pub fn fit_augmented_finite(
    dataset: &EvalDataset,
    policy_rows: &dyn Fn(&[f64]) -> Vec<f64>,
    geom: &crate::geometry::BregmanGeometry,
    eta: f64,
    fmap: Arc<FeatureMap>,
    ridge_lambda: f64,
    n_actions: usize,
) -> Result<AugmentedModel> {
    let q = fit_ridge(dataset, fmap.clone(), ridge_lambda)?;
    // one exact-target row per (visited state, action vertex)
    let mut gz = Vec::with_capacity(dataset.z.len() * n_actions);
    let mut gy = Vec::with_capacity(dataset.z.len() * n_actions);
    let state_dim = dataset.z.first().map(|z| z.len() - n_actions).unwrap_or(0);
    let mut grad = vec![0.0; n_actions];
    for z in &dataset.z {
        let state = &z[..state_dim];
        let row = policy_rows(state);
        geom.grad_omega(&row, &mut grad);
        for i in 0..n_actions {
            gz.push(embed_finite(state, i, n_actions));
            gy.push(grad[i] / eta);
        }
    }
    let gds = EvalDataset {
        z: gz,
        y: gy,
        meta: dataset.meta.clone(),
        env_steps: 0,
    };
    let g = fit_ridge(&gds, fmap, ridge_lambda)?;
    Ok(AugmentedModel { q, grad: GradOmegaModel::Joint(g), eta })
}

/// Fits the augmented surrogate for continuous actions: the value
/// component over joint `(s, a)` features, the mirror-map component (one
/// model per action coordinate over state features) on the exact targets
/// `grad omega(pi_k(s)) / eta_k`.
pub fn fit_augmented_continuous(
    dataset: &EvalDataset,
    policy_point: &dyn Fn(&[f64]) -> Vec<f64>,
    geom: &crate::geometry::BregmanGeometry,
    eta: f64,
    fmap: Arc<FeatureMap>,
    state_fmap: Arc<FeatureMap>,
    ridge_lambda: f64,
    action_dim: usize,
) -> Result<AugmentedModel> {
    let q = fit_ridge(dataset, fmap, ridge_lambda)?;
    let state_dim = dataset.z.first().map(|z| z.len() - action_dim).unwrap_or(0);
    let states: Vec<Vec<f64>> = dataset.z.iter().map(|z| z[..state_dim].to_vec()).collect();
    let mut grad = vec![0.0; action_dim];
    let mut targets = vec![Vec::with_capacity(states.len()); action_dim];
    for s in &states {
        let a = policy_point(s);
        geom.grad_omega(&a, &mut grad);
        for l in 0..action_dim {
            targets[l].push(grad[l] / eta);
        }
    }
    let mut models = Vec::with_capacity(action_dim);
    for target in targets {
        let ds = EvalDataset {
            z: states.clone(),
            y: target,
            meta: dataset.meta.clone(),
            env_steps: 0,
        };
        models.push(fit_ridge(&ds, state_fmap.clone(), ridge_lambda)?);
    }
    Ok(AugmentedModel { q, grad: GradOmegaModel::PerComponent(models), eta })
}

/// Decomposed evaluation-error estimates: deterministic error, stochastic
/// error, and the split of the deterministic part into the best-in-class
/// approximation error and the estimation bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    /// `E_s || mean-model error (s) ||_inf`.
    pub varsigma_hat: f64,
    /// `E || replicate deviation (s) ||_inf^2`.
    pub sigma2_hat: f64,
    /// Best-in-class deterministic error (fit on exact targets).
    pub app_hat: f64,
    /// `varsigma_hat - app_hat`.
    pub bia_hat: f64,
}

/// Estimates the evaluation-error components by refitting over
/// `n_replicates` independently resampled datasets. `exact_q0` provides
/// the target vector per tabular state, `states` lists probe states as
/// feature vectors, and `weighting` weighs them.
pub fn diagnose_errors(
    resample: &(dyn Fn(u64) -> EvalDataset + Sync),
    fmap: Arc<FeatureMap>,
    ridge_lambda: f64,
    exact_q0: &dyn Fn(usize) -> Vec<f64>,
    states: &[Vec<f64>],
    weighting: &[f64],
    n_actions: usize,
    n_replicates: usize,
) -> Result<ErrorReport> {
    let models: Vec<QModel> = (0..n_replicates)
        .map(|r| fit_ridge(&resample(r as u64), fmap.clone(), ridge_lambda))
        .collect::<Result<_>>()?;
    let n_s = states.len();
    // per-state per-replicate value vectors
    let mut preds = vec![vec![vec![0.0; n_actions]; n_replicates]; n_s];
    for (si, state) in states.iter().enumerate() {
        for (r, m) in models.iter().enumerate() {
            preds[si][r] = m.q0_vector(state, n_actions);
        }
    }
    let mut varsigma = 0.0;
    let mut sigma2 = 0.0;
    for si in 0..n_s {
        let mut mean = vec![0.0; n_actions];
        for r in 0..n_replicates {
            for a in 0..n_actions {
                mean[a] += preds[si][r][a] / n_replicates as f64;
            }
        }
        let exact = exact_q0(si);
        let det: f64 = mean
            .iter()
            .zip(&exact)
            .map(|(&m, &e)| (m - e).abs())
            .fold(0.0, f64::max);
        varsigma += weighting[si] * det;
        let mut dev2 = 0.0;
        for r in 0..n_replicates {
            let d: f64 = preds[si][r]
                .iter()
                .zip(&mean)
                .map(|(&p, &m)| (p - m).abs())
                .fold(0.0, f64::max);
            dev2 += d * d / n_replicates as f64;
        }
        sigma2 += weighting[si] * dev2;
    }
    // best-in-class: fit directly on exhaustive exact targets
    let mut z = Vec::with_capacity(n_s * n_actions);
    let mut y = Vec::with_capacity(n_s * n_actions);
    for (si, state) in states.iter().enumerate() {
        let exact = exact_q0(si);
        for a in 0..n_actions {
            z.push(embed_finite(state, a, n_actions));
            y.push(exact[a]);
        }
    }
    let exact_ds = EvalDataset {
        z,
        y,
        meta: EvalDatasetMeta {
            burn_in: 0,
            truncation: 0,
            n_samples: n_s * n_actions,
            policy_id: "exact".into(),
        },
        env_steps: 0,
    };
    let best = fit_ridge(&exact_ds, fmap, ridge_lambda)?;
    let mut app = 0.0;
    for (si, state) in states.iter().enumerate() {
        let exact = exact_q0(si);
        let fitted = best.q0_vector(state, n_actions);
        let err: f64 = fitted
            .iter()
            .zip(&exact)
            .map(|(&f, &e)| (f - e).abs())
            .fold(0.0, f64::max);
        app += weighting[si] * err;
    }
    Ok(ErrorReport { varsigma_hat: varsigma, sigma2_hat: sigma2, app_hat: app, bia_hat: varsigma - app })
}

//! Distance-generating functions, Bregman divergences, regularizers, and
//! per-state proximal subproblem solvers.
//!
//! The divergence argument order follows the convention that the first
//! argument is the reference (gradient) point:
//! `divergence(geom, a_ref, a) = omega(a) - omega(a_ref) - <omega'(a_ref), a - a_ref>`.
//! Under the entropy generating function this is `KL(a || a_ref)`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Components below this are treated as exactly zero before logs.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GeometryKind {
    /// Negative Shannon entropy `omega(a) = sum a_i ln a_i` on the simplex;
    /// the divergence is the KL divergence and the paired norm is l1.
    Entropy,
    /// `omega(a) = ||a||^2 / 2`; the divergence is half the squared
    /// Euclidean distance.
    Euclidean,
    /// Negative Tsallis entropy with index `q > 0`, `q != 1`, scaled as
    /// `omega(a) = (sum a_i^q - 1) / (q (q - 1))` so that the Hessian
    /// `diag(a_i^{q-2})` dominates the identity on the simplex for
    /// `q <= 2`.
    NegTsallis { q: f64 },
}

/// A distance-generating function together with the action dimension it
/// operates on. Immutable; all methods are pure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BregmanGeometry {
    pub kind: GeometryKind,
    pub action_dim: usize,
}

impl BregmanGeometry {
    pub fn entropy(action_dim: usize) -> Self {
        Self { kind: GeometryKind::Entropy, action_dim }
    }

    pub fn euclidean(action_dim: usize) -> Self {
        Self { kind: GeometryKind::Euclidean, action_dim }
    }

    pub fn neg_tsallis(action_dim: usize, q: f64) -> Result<Self> {
        if q <= 0.0 || (q - 1.0).abs() < 1e-12 {
            return Err(Error::InvalidInput(format!(
                "Tsallis index must satisfy q > 0, q != 1, got {q}"
            )));
        }
        Ok(Self { kind: GeometryKind::NegTsallis { q }, action_dim })
    }

    /// Value of the distance-generating function.
    pub fn omega(&self, a: &[f64]) -> f64 {
        match self.kind {
            GeometryKind::Entropy => a
                .iter()
                .map(|&x| if x > LOG_FLOOR { x * x.ln() } else { 0.0 })
                .sum(),
            GeometryKind::Euclidean => 0.5 * a.iter().map(|&x| x * x).sum::<f64>(),
            GeometryKind::NegTsallis { q } => {
                let s: f64 = a.iter().map(|&x| x.max(0.0).powf(q)).sum();
                (s - 1.0) / (q * (q - 1.0))
            }
        }
    }

    /// Gradient of the distance-generating function.
    pub fn grad_omega(&self, a: &[f64], out: &mut [f64]) {
        match self.kind {
            GeometryKind::Entropy => {
                for (o, &x) in out.iter_mut().zip(a) {
                    *o = x.max(LOG_FLOOR).ln() + 1.0;
                }
            }
            GeometryKind::Euclidean => out.copy_from_slice(a),
            GeometryKind::NegTsallis { q } => {
                for (o, &x) in out.iter_mut().zip(a) {
                    *o = x.max(LOG_FLOOR).powf(q - 1.0) / (q - 1.0);
                }
            }
        }
    }

    /// Bregman divergence `D(a_ref, a)`; the first argument is the
    /// reference point. Nonnegative, zero iff the arguments coincide.
    ///
    /// Errors on nonpositive components where the generating function
    /// requires a strictly positive domain (entropy/Tsallis reference with a
    /// zero component against positive mass, negative components anywhere).
    pub fn divergence(&self, a_ref: &[f64], a: &[f64]) -> Result<f64> {
        if a_ref.len() != a.len() {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: {} vs {}",
                a_ref.len(),
                a.len()
            )));
        }
        match self.kind {
            GeometryKind::Entropy => {
                let mut kl = 0.0;
                for (&r, &x) in a_ref.iter().zip(a) {
                    if x < 0.0 || r < 0.0 {
                        return Err(Error::DomainViolation(
                            "negative simplex component under entropy geometry".into(),
                        ));
                    }
                    if x <= LOG_FLOOR {
                        continue; // 0 ln 0 = 0
                    }
                    if r <= LOG_FLOOR {
                        return Err(Error::DomainViolation(
                            "KL reference has zero mass where the argument is positive".into(),
                        ));
                    }
                    kl += x * (x / r).ln();
                }
                Ok(kl.max(0.0))
            }
            GeometryKind::Euclidean => Ok(0.5
                * a_ref
                    .iter()
                    .zip(a)
                    .map(|(&r, &x)| (x - r) * (x - r))
                    .sum::<f64>()),
            GeometryKind::NegTsallis { .. } => {
                if a.iter().chain(a_ref.iter()).any(|&x| x < 0.0) {
                    return Err(Error::DomainViolation(
                        "negative component under Tsallis geometry".into(),
                    ));
                }
                let mut grad = vec![0.0; a_ref.len()];
                self.grad_omega(a_ref, &mut grad);
                let lin: f64 = grad
                    .iter()
                    .zip(a.iter().zip(a_ref))
                    .map(|(&g, (&x, &r))| g * (x - r))
                    .sum();
                Ok((self.omega(a) - self.omega(a_ref) - lin).max(0.0))
            }
        }
    }
}

/// A per-state anchor for KL-type regularizers. Tabular problems anchor at
/// a full policy table row; general-state problems use a fixed distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnchorPolicy {
    Uniform,
    /// One fixed distribution used at every state.
    Constant(Vec<f64>),
    /// Row-major `n_states x n_actions` table.
    Table { n_states: usize, n_actions: usize, rows: Vec<f64> },
}

impl AnchorPolicy {
    /// Anchor distribution at tabular state `s` (buffered in `out`).
    pub fn row(&self, s: usize, n_actions: usize, out: &mut Vec<f64>) {
        out.clear();
        match self {
            AnchorPolicy::Uniform => {
                out.resize(n_actions, 1.0 / n_actions as f64);
            }
            AnchorPolicy::Constant(p) => out.extend_from_slice(p),
            AnchorPolicy::Table { n_actions: na, rows, .. } => {
                out.extend_from_slice(&rows[s * na..(s + 1) * na]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegularizerKind {
    Null,
    /// `h^a(s) = weight * KL(a || anchor(s))`. Strongly convex with modulus
    /// `weight` relative to the KL divergence.
    KlToAnchor { weight: f64, anchor: AnchorPolicy },
    /// `h^a(s) = (weight / 2) * ||a - anchor||^2`.
    Quadratic { weight: f64, anchor: Vec<f64> },
    /// Concave surrogate `h^a(s) = (weight / 2) * (1 - ||a||^2)`,
    /// nonnegative on the simplex with curvature modulus `-weight`. Used to
    /// construct problems with a declared negative `mu_d`.
    NegQuadratic { weight: f64 },
}

/// The regularizer `h^a(s)` added to the instantaneous cost, together with
/// its declared strong-convexity modulus `mu_h` (relative to the ambient
/// divergence) and Lipschitz constant `m_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub mu_h: f64,
    pub m_h: f64,
}

impl Regularizer {
    pub fn null() -> Self {
        Self { kind: RegularizerKind::Null, mu_h: 0.0, m_h: 0.0 }
    }

    pub fn kl_to_anchor(weight: f64, anchor: AnchorPolicy, m_h: f64) -> Result<Self> {
        if weight < 0.0 {
            return Err(Error::InvalidInput("KL regularizer weight must be >= 0".into()));
        }
        Ok(Self { kind: RegularizerKind::KlToAnchor { weight, anchor }, mu_h: weight, m_h })
    }

    pub fn quadratic(weight: f64, anchor: Vec<f64>) -> Result<Self> {
        if weight < 0.0 {
            return Err(Error::InvalidInput("quadratic regularizer weight must be >= 0".into()));
        }
        // Lipschitz over the unit-diameter simplex/bounded sets is
        // weight-scaled; callers working on wider boxes should override.
        Ok(Self { kind: RegularizerKind::Quadratic { weight, anchor }, mu_h: weight, m_h: weight })
    }

    pub fn neg_quadratic(weight: f64) -> Result<Self> {
        if weight < 0.0 {
            return Err(Error::InvalidInput("concave surrogate weight must be >= 0".into()));
        }
        Ok(Self { kind: RegularizerKind::NegQuadratic { weight }, mu_h: -weight, m_h: weight })
    }

    pub fn is_null(&self) -> bool {
        matches!(self.kind, RegularizerKind::Null)
    }

    /// `h^a(s)` for tabular state `s`.
    pub fn value(&self, s: usize, a: &[f64]) -> f64 {
        match &self.kind {
            RegularizerKind::Null => 0.0,
            RegularizerKind::KlToAnchor { weight, anchor } => {
                let mut p = Vec::new();
                anchor.row(s, a.len(), &mut p);
                let mut kl = 0.0;
                for (&x, &r) in a.iter().zip(&p) {
                    if x > LOG_FLOOR {
                        kl += x * (x / r.max(LOG_FLOOR)).ln();
                    }
                }
                weight * kl.max(0.0)
            }
            RegularizerKind::Quadratic { weight, anchor } => {
                0.5 * weight
                    * a.iter().zip(anchor).map(|(&x, &c)| (x - c) * (x - c)).sum::<f64>()
            }
            RegularizerKind::NegQuadratic { weight } => {
                0.5 * weight * (1.0 - a.iter().map(|&x| x * x).sum::<f64>())
            }
        }
    }

    /// Gradient of `h^a(s)` with respect to the action.
    pub fn grad(&self, s: usize, a: &[f64], out: &mut [f64]) {
        match &self.kind {
            RegularizerKind::Null => out.fill(0.0),
            RegularizerKind::KlToAnchor { weight, anchor } => {
                let mut p = Vec::new();
                anchor.row(s, a.len(), &mut p);
                for ((o, &x), &r) in out.iter_mut().zip(a).zip(&p) {
                    *o = weight * ((x.max(LOG_FLOOR) / r.max(LOG_FLOOR)).ln() + 1.0);
                }
            }
            RegularizerKind::Quadratic { weight, anchor } => {
                for ((o, &x), &c) in out.iter_mut().zip(a).zip(anchor) {
                    *o = weight * (x - c);
                }
            }
            RegularizerKind::NegQuadratic { weight } => {
                for (o, &x) in out.iter_mut().zip(a) {
                    *o = -weight * x;
                }
            }
        }
    }

    /// Upper bound of `h` over the simplex (used for cost-bound bookkeeping).
    pub fn sup_on_simplex(&self, n_actions: usize) -> f64 {
        match &self.kind {
            RegularizerKind::Null => 0.0,
            RegularizerKind::KlToAnchor { weight, anchor } => {
                // sup over vertices of KL(e_i || p) = max_i ln(1 / p_i)
                let mut p = Vec::new();
                anchor.row(0, n_actions, &mut p);
                let worst = match anchor {
                    AnchorPolicy::Table { n_states, n_actions: na, rows } => {
                        let mut m: f64 = 0.0;
                        for s in 0..*n_states {
                            for i in 0..*na {
                                m = m.max((1.0 / rows[s * na + i].max(LOG_FLOOR)).ln());
                            }
                        }
                        m
                    }
                    _ => p
                        .iter()
                        .map(|&r| (1.0 / r.max(LOG_FLOOR)).ln())
                        .fold(0.0f64, f64::max),
                };
                weight * worst
            }
            RegularizerKind::Quadratic { weight, anchor } => {
                // diameter of the simplex from the anchor is at most 1 + |anchor|
                let norm = anchor.iter().map(|&c| c * c).sum::<f64>().sqrt();
                0.5 * weight * (1.0 + norm) * (1.0 + norm)
            }
            RegularizerKind::NegQuadratic { weight } => 0.5 * weight,
        }
    }
}

/// Feasible action sets for the proximal subproblems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSet {
    Simplex(usize),
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `{ x : A x <= b }`, row-major `a` of shape `rows x dim`.
    Polyhedral { a: Vec<f64>, b: Vec<f64>, dim: usize },
}

impl ActionSet {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(&l, &u)| l > u) {
            return Err(Error::InvalidInput("box requires lower <= upper componentwise".into()));
        }
        Ok(ActionSet::Box { lower, upper })
    }

    pub fn dim(&self) -> usize {
        match self {
            ActionSet::Simplex(n) => *n,
            ActionSet::Box { lower, .. } => lower.len(),
            ActionSet::Polyhedral { dim, .. } => *dim,
        }
    }

    /// An interior-ish feasible starting point.
    pub fn center(&self) -> Vec<f64> {
        match self {
            ActionSet::Simplex(n) => vec![1.0 / *n as f64; *n],
            ActionSet::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(&l, &u)| 0.5 * (l + u)).collect()
            }
            ActionSet::Polyhedral { dim, .. } => self.project(&vec![0.0; *dim]),
        }
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ActionSet::Simplex(_) => project_simplex(x),
            ActionSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(&v, (&l, &u))| v.clamp(l, u))
                .collect(),
            ActionSet::Polyhedral { a, b, dim } => project_polyhedron(x, a, b, *dim),
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            ActionSet::Simplex(n) => {
                x.len() == *n
                    && x.iter().all(|&v| v >= -tol)
                    && (x.iter().sum::<f64>() - 1.0).abs() <= tol.max(1e-12)
            }
            ActionSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(&v, (&l, &u))| v >= l - tol && v <= u + tol),
            ActionSet::Polyhedral { a, b, dim } => {
                b.iter().enumerate().all(|(i, &bi)| {
                    let dot: f64 =
                        a[i * dim..(i + 1) * dim].iter().zip(x).map(|(&c, &v)| c * v).sum();
                    dot <= bi + tol
                })
            }
        }
    }
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(x: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = x.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cssv = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cssv += uj;
        let t = (cssv - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    x.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Dykstra's alternating projections onto the halfspaces of `{Ax <= b}`.
fn project_polyhedron(x: &[f64], a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let rows = b.len();
    let mut y = x.to_vec();
    let mut corrections = vec![vec![0.0; dim]; rows];
    for _ in 0..20_000 {
        let mut moved = 0.0f64;
        for i in 0..rows {
            let row = &a[i * dim..(i + 1) * dim];
            let mut z: Vec<f64> = y.iter().zip(&corrections[i]).map(|(&v, &c)| v + c).collect();
            let dot: f64 = row.iter().zip(&z).map(|(&c, &v)| c * v).sum();
            let nrm2: f64 = row.iter().map(|&c| c * c).sum();
            if dot > b[i] && nrm2 > 0.0 {
                let scale = (dot - b[i]) / nrm2;
                for (zv, &c) in z.iter_mut().zip(row) {
                    *zv -= scale * c;
                }
            }
            for j in 0..dim {
                let new_corr = y[j] + corrections[i][j] - z[j];
                moved = moved.max((z[j] - y[j]).abs());
                corrections[i][j] = new_corr;
                y[j] = z[j];
            }
        }
        if moved < 1e-13 {
            break;
        }
    }
    y
}

/// One KL attraction term `coeff * KL(a || anchor)` of a simplex
/// subproblem; `coeff >= 0`.
pub struct KlTerm<'a> {
    pub coeff: f64,
    pub anchor: &'a [f64],
}

/// Closed-form minimizer of
/// `<g, a> + sum_m coeff_m * KL(a || anchor_m)` over the simplex,
/// computed in log space with max-subtraction so large `g` scales are safe.
/// Anchors may carry exact zeros; zero mass propagates to the solution.
pub fn argmin_linear_plus_kl(g: &[f64], terms: &[KlTerm<'_>]) -> Vec<f64> {
    let n = g.len();
    let total: f64 = terms.iter().map(|t| t.coeff).sum();
    assert!(total > 0.0, "simplex subproblem needs positive total KL weight");
    let mut logw = vec![0.0f64; n];
    for i in 0..n {
        let mut acc = -g[i];
        for t in terms {
            if t.coeff > 0.0 {
                acc += t.coeff * t.anchor[i].ln(); // ln(0) = -inf propagates
            }
        }
        logw[i] = acc / total;
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    for v in &mut w {
        *v /= z;
    }
    w
}

/// Proximal step on the simplex under the entropy geometry:
/// `argmin_a { <g, a> + h^a + (1/eta) KL(a || a_ref) }`.
///
/// The regularizer must be `Null` or `KlToAnchor`; `anchor_state` selects the
/// anchor row for tabular anchors.
pub fn prox_simplex_entropy(
    g: &[f64],
    reg: &Regularizer,
    anchor_state: usize,
    eta: f64,
    a_ref: &[f64],
) -> Result<Vec<f64>> {
    if eta <= 0.0 {
        return Err(Error::InvalidInput(format!("prox stepsize must be positive, got {eta}")));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("prox linear term must be finite".into()));
    }
    let inv_eta = 1.0 / eta;
    match &reg.kind {
        RegularizerKind::Null => {
            Ok(argmin_linear_plus_kl(g, &[KlTerm { coeff: inv_eta, anchor: a_ref }]))
        }
        RegularizerKind::KlToAnchor { weight, anchor } => {
            let mut p = Vec::new();
            anchor.row(anchor_state, g.len(), &mut p);
            Ok(argmin_linear_plus_kl(
                g,
                &[
                    KlTerm { coeff: inv_eta, anchor: a_ref },
                    KlTerm { coeff: *weight, anchor: &p },
                ],
            ))
        }
        _ => Err(Error::InvalidInput(
            "entropy prox supports Null or KlToAnchor regularizers".into(),
        )),
    }
}

/// KKT stationarity residual for the entropy prox solution: maximum
/// deviation of the per-component Lagrangian gradient from its mean over
/// the support.
pub fn entropy_prox_kkt_residual(
    g: &[f64],
    reg: &Regularizer,
    anchor_state: usize,
    eta: f64,
    a_ref: &[f64],
    a: &[f64],
) -> f64 {
    let n = g.len();
    let mut hg = vec![0.0; n];
    reg.grad(anchor_state, a, &mut hg);
    let mut station = Vec::with_capacity(n);
    for i in 0..n {
        if a[i] > 1e-15 && a_ref[i] > 0.0 {
            station.push(g[i] + hg[i] + ((a[i] / a_ref[i]).ln() + 1.0) / eta);
        }
    }
    if station.is_empty() {
        return f64::INFINITY;
    }
    let mean = station.iter().sum::<f64>() / station.len() as f64;
    station.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max)
}

/// Proximal step on the simplex under the Tsallis geometry, solved by
/// bisection on the simplex multiplier; supports `Null` and `KlToAnchor`
/// regularizers (the latter via a nested per-component root solve).
pub fn prox_simplex_tsallis(
    g: &[f64],
    q: f64,
    reg: &Regularizer,
    anchor_state: usize,
    eta: f64,
    a_ref: &[f64],
) -> Result<Vec<f64>> {
    if eta <= 0.0 {
        return Err(Error::InvalidInput("prox stepsize must be positive".into()));
    }
    let n = g.len();
    let geom = BregmanGeometry { kind: GeometryKind::NegTsallis { q }, action_dim: n };
    let mut grad_ref = vec![0.0; n];
    geom.grad_omega(a_ref, &mut grad_ref);
    let (lam, anchor) = match &reg.kind {
        RegularizerKind::Null => (0.0, Vec::new()),
        RegularizerKind::KlToAnchor { weight, anchor } => {
            let mut p = Vec::new();
            anchor.row(anchor_state, n, &mut p);
            (*weight, p)
        }
        _ => {
            return Err(Error::InvalidInput(
                "Tsallis prox supports Null or KlToAnchor regularizers".into(),
            ))
        }
    };
    // Per-component stationarity given multiplier mu:
    //   g_i + lam (ln(a_i/p_i) + 1) + (1/eta)(a_i^{q-1} - ref_i^{q-1})/(q-1) + mu = 0.
    // The LHS is strictly increasing in a_i, so a_i(mu) is unique and
    // decreasing in mu; bisect on mu until the components sum to one.
    let component = |i: usize, mu: f64| -> f64 {
        let target = -(g[i] + mu) + grad_ref[i] / eta - if lam > 0.0 { lam } else { 0.0 };
        // Solve f(a) = lam*ln(a/p_i) + a^{q-1}/(eta (q-1)) = target by bisection.
        let f = |a: f64| -> f64 {
            let mut v = a.max(LOG_FLOOR).powf(q - 1.0) / (eta * (q - 1.0));
            if lam > 0.0 {
                v += lam * (a.max(LOG_FLOOR) / anchor[i].max(LOG_FLOOR)).ln();
            }
            v
        };
        let (mut lo, mut hi) = (1e-200f64, 1e8f64);
        if f(lo) > target {
            return 0.0;
        }
        if f(hi) < target {
            return hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let sum_at = |mu: f64| -> f64 { (0..n).map(|i| component(i, mu)).sum() };
    let (mut lo, mut hi) = (-1e8f64, 1e8f64);
    if sum_at(lo) < 1.0 || sum_at(hi) > 1.0 {
        return Err(Error::ConvergenceFailure {
            context: "Tsallis prox multiplier bracket".into(),
            iterations: 0,
            residual: f64::INFINITY,
            best: a_ref.to_vec(),
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum_at(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let mu = 0.5 * (lo + hi);
    let mut a: Vec<f64> = (0..n).map(|i| component(i, mu)).collect();
    let z: f64 = a.iter().sum();
    if z <= 0.0 {
        return Err(Error::ConvergenceFailure {
            context: "Tsallis prox produced empty support".into(),
            iterations: 200,
            residual: 1.0,
            best: a_ref.to_vec(),
        });
    }
    for v in &mut a {
        *v /= z;
    }
    Ok(a)
}

/// Default iteration cap for [`prox_generic`].
pub const PROX_GENERIC_MAX_ITERS: usize = 100_000;

/// Accelerated projected gradient with backtracking line search for
/// `min_{a in set} f(a)`, where `f` is strongly convex with modulus
/// `mu > 0`. The oracle writes the gradient into its second argument and
/// returns the value. Terminates when the projected-gradient-mapping norm
/// drops below `tol`; deterministic given inputs.
pub fn prox_generic(
    f: &dyn Fn(&[f64], &mut [f64]) -> f64,
    mu: f64,
    set: &ActionSet,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    if mu <= 0.0 {
        return Err(Error::InvalidInput("prox_generic requires a positive modulus".into()));
    }
    let n = set.dim();
    let mut x = set.center();
    let mut y = x.clone();
    let mut grad = vec![0.0; n];
    let mut grad_x = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut lipschitz = mu.max(1.0);
    let mut t_acc = 1.0f64;
    let mut best = x.clone();
    let mut best_res = f64::INFINITY;
    let mut fx = f(&x, &mut grad_x);

    for _ in 0..max_iters {
        let fy = f(&y, &mut grad);
        // Backtracking: find L with f(x+) <= f(y) + <g, x+-y> + L/2 |x+-y|^2.
        let mut xn;
        let mut fxn;
        loop {
            let step: Vec<f64> =
                y.iter().zip(&grad).map(|(&v, &g)| v - g / lipschitz).collect();
            xn = set.project(&step);
            let diff: Vec<f64> = xn.iter().zip(&y).map(|(&a, &b)| a - b).collect();
            let quad: f64 = diff.iter().map(|&d| d * d).sum::<f64>() * lipschitz / 2.0;
            let lin: f64 = diff.iter().zip(&grad).map(|(&d, &g)| d * g).sum();
            fxn = f(&xn, &mut scratch);
            if fxn <= fy + lin + quad + 1e-12 * (1.0 + fy.abs()) || lipschitz > 1e18 {
                break;
            }
            lipschitz *= 2.0;
        }
        // Gradient-mapping residual at the accepted iterate (not the
        // extrapolated point, whose momentum offset never settles).
        let fxg = f(&xn, &mut grad_x);
        let probe: Vec<f64> =
            xn.iter().zip(&grad_x).map(|(&v, &g)| v - g / lipschitz).collect();
        let probe = set.project(&probe);
        let res = probe
            .iter()
            .zip(&xn)
            .map(|(&a, &b)| (a - b) * lipschitz)
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt();
        if res < best_res {
            best_res = res;
            best = xn.clone();
        }
        if res <= tol {
            return Ok(xn);
        }
        let _ = fxg;
        // Once the accelerated phase is in the basin, objective comparisons
        // drown in rounding noise; polish with plain projected-gradient
        // fixed-point iterations, which are driven by gradients only.
        if res <= 1e-5 * (1.0 + lipschitz) {
            return polish_projected_gradient(
                f, set, xn, lipschitz, mu, tol, max_iters, best, best_res,
            );
        }
        // Monotone restart keeps the iteration stable when momentum
        // overshoots.
        if fxn > fx + 1e-14 * (1.0 + fx.abs()) {
            y = x.clone();
            t_acc = 1.0;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
            let beta = (t_acc - 1.0) / t_next;
            y = xn.iter().zip(&x).map(|(&a, &b)| a + beta * (a - b)).collect();
            y = set.project(&y);
            t_acc = t_next;
            x = xn;
            fx = fxn;
        }
        // Let the Lipschitz estimate drift back down so backtracking can
        // recover from a conservative doubling.
        lipschitz = (lipschitz * 0.97).max(mu.min(1e9));
    }
    Err(Error::ConvergenceFailure {
        context: "prox_generic".into(),
        iterations: max_iters,
        residual: best_res,
        best,
    })
}

fn polish_projected_gradient(
    f: &dyn Fn(&[f64], &mut [f64]) -> f64,
    set: &ActionSet,
    mut x: Vec<f64>,
    mut lipschitz: f64,
    mu: f64,
    tol: f64,
    budget: usize,
    mut best: Vec<f64>,
    mut best_res: f64,
) -> Result<Vec<f64>> {
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut last_dist = f64::INFINITY;
    let mut stall = 0usize;
    for _ in 0..budget {
        f(&x, &mut grad);
        let step: Vec<f64> = x.iter().zip(&grad).map(|(&v, &g)| v - g / lipschitz).collect();
        let xp = set.project(&step);
        let dist = xp
            .iter()
            .zip(&x)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let res = dist * lipschitz;
        if res < best_res {
            best_res = res;
            best = xp.clone();
        }
        if res <= tol {
            return Ok(xp);
        }
        // The fixed-point map contracts when the frozen stepsize is valid;
        // a non-shrinking step means the local curvature exceeds it.
        if dist > last_dist * (1.0 - 0.25 * mu / lipschitz) {
            stall += 1;
            if stall > 30 {
                lipschitz = (lipschitz * 2.0).min(1e18);
                stall = 0;
                last_dist = f64::INFINITY;
                x = xp;
                continue;
            }
        } else {
            stall = 0;
        }
        last_dist = dist;
        x = xp;
    }
    Err(Error::ConvergenceFailure {
        context: "prox_generic polish".into(),
        iterations: budget,
        residual: best_res,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng as _;

    fn random_simplex(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| -(rng.gen::<f64>().max(1e-12)).ln()).collect();
        let s: f64 = v.iter().sum();
        for x in &mut v {
            *x /= s;
        }
        v
    }

    #[test]
    fn kl_divergence_matches_reference_value() {
        let geom = BregmanGeometry::entropy(2);
        let d = geom.divergence(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        // sum a_i ln(a_i / ref_i) = 0.5 ln 2 + 0.5 ln(2/3) = 0.5 ln(4/3)
        let expect = 0.5 * (4.0f64 / 3.0).ln();
        assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
        assert!((d - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn euclidean_divergence_examples() {
        let geom = BregmanGeometry::euclidean(2);
        assert_eq!(geom.divergence(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let d = geom.divergence(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((d - 12.5).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_zero_reference_mass() {
        let geom = BregmanGeometry::entropy(2);
        let err = geom.divergence(&[0.0, 1.0], &[0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::DomainViolation(_)));
    }

    #[test]
    fn divergence_dominates_half_squared_norm() {
        // KL vs l1 on the simplex, Euclidean vs l2, and scaled Tsallis vs l2
        // for q in (0, 2].
        let mut rng = stream_rng(11, 0);
        for _ in 0..1000 {
            let n = 2 + (rng.gen::<u64>() % 5) as usize;
            let a1 = random_simplex(&mut rng, n);
            let a2 = random_simplex(&mut rng, n);

            let ent = BregmanGeometry::entropy(n);
            let l1: f64 = a1.iter().zip(&a2).map(|(&x, &y)| (x - y).abs()).sum();
            assert!(ent.divergence(&a2, &a1).unwrap() >= 0.5 * l1 * l1 - 1e-12);

            let euc = BregmanGeometry::euclidean(n);
            let l2sq: f64 = a1.iter().zip(&a2).map(|(&x, &y)| (x - y) * (x - y)).sum();
            assert!(euc.divergence(&a2, &a1).unwrap() >= 0.5 * l2sq - 1e-12);

            for &q in &[0.5, 1.5, 2.0] {
                let ts = BregmanGeometry::neg_tsallis(n, q).unwrap();
                assert!(
                    ts.divergence(&a2, &a1).unwrap() >= 0.5 * l2sq - 1e-10,
                    "q={q}"
                );
            }
        }
    }

    #[test]
    fn entropy_prox_uniform_on_constant_cost() {
        let reg = Regularizer::null();
        let a_ref = vec![0.25; 4];
        let a = prox_simplex_entropy(&[3.0; 4], &reg, 0, 1.7, &a_ref).unwrap();
        for &x in &a {
            assert!((x - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn entropy_prox_reference_softmax_value() {
        let reg = Regularizer::null();
        let a = prox_simplex_entropy(&[1.0, 0.0], &reg, 0, 2.0f64.ln(), &[0.5, 0.5]).unwrap();
        assert!((a[0] - 1.0 / 3.0).abs() < 1e-14);
        assert!((a[1] - 2.0 / 3.0).abs() < 1e-14);
        let kkt = entropy_prox_kkt_residual(&[1.0, 0.0], &reg, 0, 2.0f64.ln(), &[0.5, 0.5], &a);
        assert!(kkt < 1e-10);
    }

    #[test]
    fn entropy_prox_small_step_stays_at_reference() {
        let reg = Regularizer::null();
        let a_ref = vec![0.2, 0.3, 0.5];
        let a = prox_simplex_entropy(&[4.0, -2.0, 1.0], &reg, 0, 1e-12, &a_ref).unwrap();
        for (x, r) in a.iter().zip(&a_ref) {
            assert!((x - r).abs() < 1e-9);
        }
    }

    /// Independent oracle: projected gradient descent with simplex
    /// projection and boundary clipping, run far past the target accuracy.
    fn pgd_simplex_oracle(
        g: &[f64],
        reg: &Regularizer,
        s: usize,
        eta: f64,
        a_ref: &[f64],
    ) -> Vec<f64> {
        let n = g.len();
        let mut a = vec![1.0 / n as f64; n];
        let mut grad = vec![0.0; n];
        let mut hg = vec![0.0; n];
        for it in 0..400_000 {
            reg.grad(s, &a, &mut hg);
            for i in 0..n {
                grad[i] = g[i]
                    + hg[i]
                    + ((a[i].max(1e-18) / a_ref[i].max(1e-18)).ln() + 1.0) / eta;
            }
            let step = 0.05 / (1.0 / eta + reg.mu_h.max(0.0) + 1.0) / (1.0 + it as f64 / 50_000.0);
            let moved: Vec<f64> = a.iter().zip(&grad).map(|(&x, &d)| x - step * d).collect();
            let mut proj = project_simplex(&moved);
            for v in &mut proj {
                *v = v.max(1e-16);
            }
            let z: f64 = proj.iter().sum();
            for v in &mut proj {
                *v /= z;
            }
            a = proj;
        }
        a
    }

    #[test]
    fn entropy_prox_agrees_with_projected_gradient_oracle() {
        let mut rng = stream_rng(23, 0);
        for trial in 0..5 {
            let n = 3;
            let g: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let a_ref = random_simplex(&mut rng, n);
            let anchor = random_simplex(&mut rng, n);
            let reg = if trial % 2 == 0 {
                Regularizer::null()
            } else {
                Regularizer::kl_to_anchor(0.7, AnchorPolicy::Constant(anchor), 1.0).unwrap()
            };
            let closed = prox_simplex_entropy(&g, &reg, 0, 0.9, &a_ref).unwrap();
            let oracle = pgd_simplex_oracle(&g, &reg, 0, 0.9, &a_ref);
            for (c, o) in closed.iter().zip(&oracle) {
                assert!((c - o).abs() < 1e-8, "trial {trial}: {closed:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn entropy_prox_three_point_inequality() {
        // f_obj(p) + (mu_total) D(p, a) <= f_obj(a) + 1e-8 for sampled a,
        // where f_obj includes the (1/eta) D(a_ref, .) term.
        let mut rng = stream_rng(31, 0);
        let n = 4;
        let geom = BregmanGeometry::entropy(n);
        for trial in 0..50 {
            let g: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
            let a_ref = random_simplex(&mut rng, n);
            let eta = 0.2 + rng.gen::<f64>() * 2.0;
            let lam = if trial % 2 == 0 { 0.0 } else { 0.5 };
            let reg = if lam == 0.0 {
                Regularizer::null()
            } else {
                Regularizer::kl_to_anchor(lam, AnchorPolicy::Uniform, 1.0).unwrap()
            };
            let p = prox_simplex_entropy(&g, &reg, 0, eta, &a_ref).unwrap();
            let f_obj = |a: &[f64]| -> f64 {
                let lin: f64 = g.iter().zip(a).map(|(&gi, &ai)| gi * ai).sum();
                lin + reg.value(0, a) + geom.divergence(&a_ref, a).unwrap() / eta
            };
            let mu_total = 1.0 / eta + lam;
            for _ in 0..20 {
                let a = random_simplex(&mut rng, n);
                let lhs = f_obj(&p) + mu_total * geom.divergence(&p, &a).unwrap();
                assert!(lhs <= f_obj(&a) + 1e-8, "three-point violated");
            }
        }
    }

    #[test]
    fn tsallis_prox_matches_entropy_free_oracle() {
        // Against brute-force grid + refinement on a 2-simplex.
        let g = [0.8, -0.3];
        let a_ref = [0.6, 0.4];
        let q = 1.5;
        let eta = 0.7;
        let geom = BregmanGeometry::neg_tsallis(2, q).unwrap();
        let obj = |t: f64| -> f64 {
            let a = [t, 1.0 - t];
            g[0] * a[0] + g[1] * a[1] + geom.divergence(&a_ref, &a).unwrap() / eta
        };
        let mut best_t = 0.0;
        let mut best = f64::INFINITY;
        for i in 1..100_000 {
            let t = i as f64 / 100_000.0;
            let v = obj(t);
            if v < best {
                best = v;
                best_t = t;
            }
        }
        let a = prox_simplex_tsallis(&g, q, &Regularizer::null(), 0, eta, &a_ref).unwrap();
        assert!((a[0] - best_t).abs() < 1e-4, "{} vs {}", a[0], best_t);
        assert!((a[0] + a[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn prox_generic_unconstrained_minimizer_inside_box() {
        let c = [0.3, -0.2];
        let f = |a: &[f64], grad: &mut [f64]| -> f64 {
            for i in 0..2 {
                grad[i] = a[i] - c[i];
            }
            0.5 * ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2))
        };
        let set = ActionSet::boxed(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let a = prox_generic(&f, 1.0, &set, 1e-10, PROX_GENERIC_MAX_ITERS).unwrap();
        assert!((a[0] - c[0]).abs() < 1e-9 && (a[1] - c[1]).abs() < 1e-9);
    }

    #[test]
    fn prox_generic_clamps_to_box_corner() {
        let f = |a: &[f64], grad: &mut [f64]| -> f64 {
            for i in 0..2 {
                grad[i] = a[i] - 2.0;
            }
            0.5 * ((a[0] - 2.0).powi(2) + (a[1] - 2.0).powi(2))
        };
        let set = ActionSet::boxed(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let a = prox_generic(&f, 1.0, &set, 1e-10, PROX_GENERIC_MAX_ITERS).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-9 && (a[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prox_generic_simplex_vertex_optimum() {
        // <(1,-1), a> + 0.5 |a|^2 over the 2-simplex. Brute-force + KKT puts
        // the optimum at (0, 1): along a = (t, 1-t), the objective
        // t - (1-t) + (t^2 + (1-t)^2)/2 is minimized at t = 0 on [0,1].
        let f = |a: &[f64], grad: &mut [f64]| -> f64 {
            grad[0] = 1.0 + a[0];
            grad[1] = -1.0 + a[1];
            a[0] - a[1] + 0.5 * (a[0] * a[0] + a[1] * a[1])
        };
        let set = ActionSet::Simplex(2);
        let a = prox_generic(&f, 1.0, &set, 1e-10, PROX_GENERIC_MAX_ITERS).unwrap();
        assert!(a[0].abs() < 1e-8 && (a[1] - 1.0).abs() < 1e-8, "{a:?}");
    }

    #[test]
    fn entropy_prox_agrees_with_generic_solver_through_mirror_map() {
        // Solve the same KL-regularized subproblem with the generic solver
        // (smooth objective on the simplex interior) and compare.
        let mut rng = stream_rng(47, 0);
        for _ in 0..5 {
            let n = 3;
            let g: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let a_ref = random_simplex(&mut rng, n);
            let eta = 0.8;
            let closed = prox_simplex_entropy(&g, &Regularizer::null(), 0, eta, &a_ref).unwrap();
            let gcopy = g.clone();
            let refcopy = a_ref.clone();
            let f = move |a: &[f64], grad: &mut [f64]| -> f64 {
                let mut val = 0.0;
                for i in 0..a.len() {
                    let ai = a[i].max(1e-14);
                    val += gcopy[i] * a[i] + (a[i] * (ai / refcopy[i]).ln()) / eta;
                    grad[i] = gcopy[i] + ((ai / refcopy[i]).ln() + 1.0) / eta;
                }
                val
            };
            let set = ActionSet::Simplex(n);
            let generic = prox_generic(&f, 1.0 / eta, &set, 1e-10, PROX_GENERIC_MAX_ITERS).unwrap();
            for (c, o) in closed.iter().zip(&generic) {
                assert!((c - o).abs() < 1e-8, "{closed:?} vs {generic:?}");
            }
        }
    }

    #[test]
    fn polyhedral_projection_respects_halfspaces() {
        // Triangle x >= 0, y >= 0, x + y <= 1 written as Ax <= b.
        let set = ActionSet::Polyhedral {
            a: vec![-1.0, 0.0, 0.0, -1.0, 1.0, 1.0],
            b: vec![0.0, 0.0, 1.0],
            dim: 2,
        };
        let p = set.project(&[2.0, 2.0]);
        assert!(set.contains(&p, 1e-9), "{p:?}");
        assert!((p[0] - 0.5).abs() < 1e-8 && (p[1] - 0.5).abs() < 1e-8);
    }
}

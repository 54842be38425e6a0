//! Stepsize and weight schedules for mirror descent and dual averaging,
//! validated against their admissibility rules at construction time.

use crate::error::{Error, Result, ScheduleRule};
use serde::{Deserialize, Serialize};

/// Curvature bookkeeping: declared moduli, not estimates. `mu_q` is the
/// weak-convexity modulus of the action-value function (zero in the
/// tabular finite-action case, where it is linear in the action), `mu_h`
/// comes from the regularizer, and `mu_d = mu_h - mu_q` decides whether
/// the advantage is convex. `m_q`/`m_q_tilde` are Lipschitz constants used
/// by the continuous-action schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSpec {
    pub mu_q: f64,
    pub mu_h: f64,
    pub m_q: f64,
    pub m_q_tilde: f64,
}

impl CurvatureSpec {
    pub fn tabular(mu_h: f64) -> Self {
        Self { mu_q: 0.0, mu_h, m_q: 0.0, m_q_tilde: 0.0 }
    }

    pub fn mu_d(&self) -> f64 {
        self.mu_h - self.mu_q
    }
}

/// Mirror-descent stepsize rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PmdScheduleKind {
    /// `eta_k = gamma^{-k}`: the linear-rate schedule.
    GeometricEta { gamma: f64 },
    ConstantEta { eta: f64 },
    /// `eta = 1 / (2 |mu_d|)` for declared `mu_d < 0`.
    NonconvexEta,
    /// Constant `eta = sqrt(d0 / (k [(c_eff + m_h)^2 + sigma2]))` with the
    /// horizon `k` fixed a priori; `beta_t = 1`.
    SqrtHorizon { d0: f64, c_eff: f64, m_h: f64, sigma2: f64 },
    /// `eta_t = 1 / (mu_h (t+1))`, `beta_t = 1`.
    InverseT,
    /// `eta_t = 2 / (mu_h (t+1))`, `beta_t = t+2`.
    InverseTWeighted,
    /// Constant `eta = min(|mu_d| / 2, 1 / sqrt(k))` for declared
    /// `mu_d < 0`, horizon fixed a priori.
    ContinuousNonconvex,
    /// Explicit per-iteration stepsizes and averaging weights; validated
    /// against both admissibility rules.
    Custom { etas: Vec<f64>, betas: Vec<f64> },
}

/// A validated mirror-descent schedule over a fixed horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmdSchedule {
    pub kind: PmdScheduleKind,
    pub curvature: CurvatureSpec,
    pub k_max: usize,
}

impl PmdSchedule {
    /// Validates the stepsize rule `mu_d + 1/eta_k >= 0` for every
    /// iteration of the horizon, and the weighted rule
    /// `beta_k/eta_k <= beta_{k-1} (mu_h + 1/eta_{k-1})` for the averaged
    /// schedules. Schedules that need the horizon a priori freeze `k_max`;
    /// changing it means constructing a new schedule.
    pub fn new(kind: PmdScheduleKind, curvature: CurvatureSpec, k_max: usize) -> Result<Self> {
        let sched = Self { kind, curvature, k_max };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        let mu_d = self.curvature.mu_d();
        match &self.kind {
            PmdScheduleKind::GeometricEta { gamma } => {
                if !(0.0..1.0).contains(gamma) {
                    return Err(Error::InvalidInput(format!(
                        "geometric stepsize needs gamma in [0,1), got {gamma}"
                    )));
                }
            }
            PmdScheduleKind::ConstantEta { eta } => {
                if *eta <= 0.0 {
                    return Err(Error::InvalidInput("constant stepsize must be positive".into()));
                }
            }
            PmdScheduleKind::NonconvexEta | PmdScheduleKind::ContinuousNonconvex => {
                if mu_d >= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "nonconvex stepsize needs mu_d < 0, got {mu_d}"
                    )));
                }
            }
            PmdScheduleKind::SqrtHorizon { d0, c_eff, m_h, sigma2 } => {
                if *d0 <= 0.0 || *c_eff < 0.0 || *m_h < 0.0 || *sigma2 < 0.0 || self.k_max == 0 {
                    return Err(Error::InvalidInput(
                        "sqrt-horizon stepsize needs d0 > 0, nonnegative constants, k_max > 0"
                            .into(),
                    ));
                }
            }
            PmdScheduleKind::InverseT | PmdScheduleKind::InverseTWeighted => {
                if self.curvature.mu_h <= 0.0 {
                    return Err(Error::InvalidInput(
                        "inverse-t stepsizes need a strongly convex regularizer (mu_h > 0)".into(),
                    ));
                }
            }
            PmdScheduleKind::Custom { etas, betas } => {
                if etas.len() < self.k_max || betas.len() < self.k_max {
                    return Err(Error::InvalidInput(
                        "custom schedule shorter than the horizon".into(),
                    ));
                }
            }
        }
        for k in 0..self.k_max {
            let eta = self.eta(k);
            if !(eta > 0.0) {
                return Err(Error::InvalidInput(format!("eta_{k} = {eta} is not positive")));
            }
            let slack = mu_d + 1.0 / eta;
            if slack < -1e-12 {
                return Err(Error::ScheduleViolation {
                    rule: ScheduleRule::MirrorStepNonneg,
                    k: k as i64,
                    detail: format!("mu_d = {mu_d}, eta_k = {eta}, sum = {slack}"),
                });
            }
            if self.is_weighted() && k >= 1 {
                let lhs = self.beta(k) / eta;
                let rhs = self.beta(k - 1) * (self.curvature.mu_h + 1.0 / self.eta(k - 1));
                if lhs > rhs * (1.0 + 1e-12) {
                    return Err(Error::ScheduleViolation {
                        rule: ScheduleRule::MirrorWeightedStep,
                        k: k as i64,
                        detail: format!("beta_k/eta_k = {lhs} > {rhs}"),
                    });
                }
            }
        }
        Ok(())
    }

    fn is_weighted(&self) -> bool {
        matches!(
            self.kind,
            PmdScheduleKind::SqrtHorizon { .. }
                | PmdScheduleKind::InverseT
                | PmdScheduleKind::InverseTWeighted
                | PmdScheduleKind::Custom { .. }
        )
    }

    pub fn eta(&self, k: usize) -> f64 {
        let mu_d = self.curvature.mu_d();
        match &self.kind {
            PmdScheduleKind::GeometricEta { gamma } => gamma.powi(-(k as i32)),
            PmdScheduleKind::ConstantEta { eta } => *eta,
            PmdScheduleKind::NonconvexEta => 1.0 / (2.0 * mu_d.abs()),
            PmdScheduleKind::SqrtHorizon { d0, c_eff, m_h, sigma2 } => {
                (d0 / (self.k_max as f64 * ((c_eff + m_h).powi(2) + sigma2))).sqrt()
            }
            PmdScheduleKind::InverseT => 1.0 / (self.curvature.mu_h * (k as f64 + 1.0)),
            PmdScheduleKind::InverseTWeighted => 2.0 / (self.curvature.mu_h * (k as f64 + 1.0)),
            PmdScheduleKind::ContinuousNonconvex => {
                (mu_d.abs() / 2.0).min(1.0 / (self.k_max.max(1) as f64).sqrt())
            }
            PmdScheduleKind::Custom { etas, .. } => etas[k],
        }
    }

    /// Averaging weight attached to iteration `k` (uniform unless the
    /// schedule declares otherwise).
    pub fn beta(&self, k: usize) -> f64 {
        match &self.kind {
            PmdScheduleKind::InverseTWeighted => k as f64 + 2.0,
            PmdScheduleKind::Custom { betas, .. } => betas[k],
            _ => 1.0,
        }
    }
}

/// Dual-averaging weight rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PdaScheduleKind {
    /// `beta_k = gamma^{-k}`, constant `lambda_k = lambda >= 0`.
    Geometric { gamma: f64, lambda: f64 },
    /// `beta_k = k+1`, constant `lambda_k = lambda` (typically `mu_h` or
    /// the declared `mu_d` of the approximation class).
    LinearBetaConstLambda { lambda: f64 },
    /// `beta_k = k+1`, `lambda_k = lambda (k+1)^{3/2}`.
    LinearBetaPolyLambda { lambda: f64 },
    /// `beta_t = t+1`, constant `lambda = k_max (k_max+1) |mu_d|` with the
    /// horizon fixed a priori; for declared `mu_d < 0`.
    Nonconvex,
    /// Explicit per-iteration weights; validated against both rules.
    Custom { betas: Vec<f64>, lambdas: Vec<f64> },
}

/// A validated dual-averaging schedule over a fixed horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdaSchedule {
    pub kind: PdaScheduleKind,
    pub curvature: CurvatureSpec,
    pub k_max: usize,
}

impl PdaSchedule {
    /// Validates `mu_k = mu_d sum_{t<=k} beta_t + lambda_k >= 0` for every
    /// `k` in `-1..k_max` (with `mu_{-1} = lambda_{-1} = lambda_0`),
    /// nondecreasing `lambda_k`, and rejects schedules whose subproblems
    /// lose strong convexity (`mu_k = 0` with `mu_h = 0`).
    pub fn new(kind: PdaScheduleKind, curvature: CurvatureSpec, k_max: usize) -> Result<Self> {
        let sched = Self { kind, curvature, k_max };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        match &self.kind {
            PdaScheduleKind::Geometric { gamma, lambda } => {
                if !(0.0..1.0).contains(gamma) {
                    return Err(Error::InvalidInput(format!(
                        "geometric weights need gamma in [0,1), got {gamma}"
                    )));
                }
                if *lambda < 0.0 {
                    return Err(Error::InvalidInput("lambda must be nonnegative".into()));
                }
            }
            PdaScheduleKind::LinearBetaConstLambda { lambda }
            | PdaScheduleKind::LinearBetaPolyLambda { lambda } => {
                if *lambda < 0.0 {
                    return Err(Error::InvalidInput("lambda must be nonnegative".into()));
                }
            }
            PdaScheduleKind::Nonconvex => {
                if self.curvature.mu_d() >= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "nonconvex weights need mu_d < 0, got {}",
                        self.curvature.mu_d()
                    )));
                }
                if self.k_max == 0 {
                    return Err(Error::InvalidInput(
                        "nonconvex weights need the horizon fixed a priori".into(),
                    ));
                }
            }
            PdaScheduleKind::Custom { betas, lambdas } => {
                if betas.len() < self.k_max || lambdas.len() < self.k_max {
                    return Err(Error::InvalidInput(
                        "custom schedule shorter than the horizon".into(),
                    ));
                }
            }
        }
        let mu_d = self.curvature.mu_d();
        // k = -1 case: mu_{-1} = lambda_{-1} (we take lambda_{-1} = lambda_0)
        if self.lambda(0) < 0.0 {
            return Err(Error::ScheduleViolation {
                rule: ScheduleRule::DualWeightNonneg,
                k: -1,
                detail: format!("lambda_{{-1}} = {}", self.lambda(0)),
            });
        }
        let mut beta_sum = 0.0;
        for k in 0..self.k_max {
            beta_sum += self.beta(k);
            let mu_k = mu_d * beta_sum + self.lambda(k);
            if mu_k < -1e-12 {
                return Err(Error::ScheduleViolation {
                    rule: ScheduleRule::DualWeightNonneg,
                    k: k as i64,
                    detail: format!(
                        "mu_d = {mu_d}, sum beta = {beta_sum}, lambda_k = {}, mu_k = {mu_k}",
                        self.lambda(k)
                    ),
                });
            }
            if k + 1 < self.k_max && self.lambda(k + 1) < self.lambda(k) - 1e-15 {
                return Err(Error::ScheduleViolation {
                    rule: ScheduleRule::DualLambdaNondecreasing,
                    k: k as i64,
                    detail: format!(
                        "lambda_{{k+1}} = {} < lambda_k = {}",
                        self.lambda(k + 1),
                        self.lambda(k)
                    ),
                });
            }
            // prox solutions are unique whenever mu_k > 0; a zero modulus
            // is only acceptable with a strongly convex regularizer
            if mu_k <= 0.0 && self.curvature.mu_h <= 0.0 {
                return Err(Error::ScheduleViolation {
                    rule: ScheduleRule::DualUniqueness,
                    k: k as i64,
                    detail: format!("mu_k = {mu_k} with mu_h = {}", self.curvature.mu_h),
                });
            }
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        match &self.kind {
            PdaScheduleKind::Geometric { gamma, .. } => gamma.powi(-(k as i32)),
            PdaScheduleKind::LinearBetaConstLambda { .. }
            | PdaScheduleKind::LinearBetaPolyLambda { .. }
            | PdaScheduleKind::Nonconvex => k as f64 + 1.0,
            PdaScheduleKind::Custom { betas, .. } => betas[k],
        }
    }

    pub fn lambda(&self, k: usize) -> f64 {
        match &self.kind {
            PdaScheduleKind::Geometric { lambda, .. } => *lambda,
            PdaScheduleKind::LinearBetaConstLambda { lambda } => *lambda,
            PdaScheduleKind::LinearBetaPolyLambda { lambda } => {
                lambda * (k as f64 + 1.0).powf(1.5)
            }
            PdaScheduleKind::Nonconvex => {
                let k_max = self.k_max as f64;
                k_max * (k_max + 1.0) * self.curvature.mu_d().abs()
            }
            PdaScheduleKind::Custom { lambdas, .. } => lambdas[k],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_eta_accepts_convex_curvature() {
        let sched = PmdSchedule::new(
            PmdScheduleKind::GeometricEta { gamma: 0.9 },
            CurvatureSpec::tabular(0.0),
            150,
        )
        .unwrap();
        assert!((sched.eta(3) - 0.9f64.powi(-3)).abs() < 1e-15);
    }

    #[test]
    fn geometric_eta_rejects_negative_mu_d_naming_the_rule() {
        let curv = CurvatureSpec { mu_q: 0.5, mu_h: 0.0, m_q: 0.0, m_q_tilde: 0.0 };
        let err = PmdSchedule::new(PmdScheduleKind::GeometricEta { gamma: 0.9 }, curv, 40)
            .unwrap_err();
        match err {
            Error::ScheduleViolation { rule, .. } => {
                assert_eq!(rule, ScheduleRule::MirrorStepNonneg);
                assert!(rule.to_string().contains("mu_d + 1/eta_k"));
            }
            other => panic!("expected schedule violation, got {other:?}"),
        }
    }

    #[test]
    fn nonconvex_eta_satisfies_step_rule() {
        let curv = CurvatureSpec { mu_q: 0.4, mu_h: 0.0, m_q: 0.0, m_q_tilde: 0.0 };
        let sched = PmdSchedule::new(PmdScheduleKind::NonconvexEta, curv, 100).unwrap();
        // eta = 1/(2 * 0.4): mu_d + 1/eta = -0.4 + 0.8 = 0.4 >= 0
        assert!((sched.eta(0) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn weighted_schedules_hit_the_weighted_rule_with_equality() {
        let curv = CurvatureSpec::tabular(0.7);
        for kind in [PmdScheduleKind::InverseT, PmdScheduleKind::InverseTWeighted] {
            let sched = PmdSchedule::new(kind, curv, 200).unwrap();
            for k in 1..200 {
                let lhs = sched.beta(k) / sched.eta(k);
                let rhs = sched.beta(k - 1) * (curv.mu_h + 1.0 / sched.eta(k - 1));
                assert!(lhs <= rhs * (1.0 + 1e-12), "k={k}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn pda_geometric_lambda_zero_needs_strong_convexity() {
        // mu_d = 0 and lambda = 0 leaves the subproblem without a unique
        // solution; rejected with the uniqueness rule.
        let err = PdaSchedule::new(
            PdaScheduleKind::Geometric { gamma: 0.9, lambda: 0.0 },
            CurvatureSpec::tabular(0.0),
            50,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::ScheduleViolation { rule: ScheduleRule::DualUniqueness, .. }
        ));
        // with mu_h > 0 it passes
        PdaSchedule::new(
            PdaScheduleKind::Geometric { gamma: 0.9, lambda: 0.0 },
            CurvatureSpec::tabular(0.3),
            50,
        )
        .unwrap();
    }

    #[test]
    fn pda_weight_rule_violation_names_the_inequality() {
        // mu_d < 0 with a lambda too small to compensate
        let curv = CurvatureSpec { mu_q: 1.0, mu_h: 0.0, m_q: 0.0, m_q_tilde: 0.0 };
        let err = PdaSchedule::new(
            PdaScheduleKind::LinearBetaConstLambda { lambda: 0.5 },
            curv,
            30,
        )
        .unwrap_err();
        match err {
            Error::ScheduleViolation { rule, .. } => {
                assert_eq!(rule, ScheduleRule::DualWeightNonneg);
                assert!(rule.to_string().contains("lambda_k"));
            }
            other => panic!("expected schedule violation, got {other:?}"),
        }
    }

    #[test]
    fn pda_nonconvex_lambda_matches_horizon() {
        let curv = CurvatureSpec { mu_q: 0.2, mu_h: 0.0, m_q: 1.0, m_q_tilde: 1.0 };
        let sched = PdaSchedule::new(PdaScheduleKind::Nonconvex, curv, 10).unwrap();
        assert!((sched.lambda(0) - 10.0 * 11.0 * 0.2).abs() < 1e-12);
        assert_eq!(sched.beta(4), 5.0);
    }
}

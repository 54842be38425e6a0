//! Discrete-time linear quadratic regulator with Gaussian process noise and
//! clipped quadratic cost, plus a Riccati fixed-point solver used as the
//! baseline oracle.

use crate::env::{ActionSpace, EnvAction, Environment};
use crate::error::{Error, Result};
use crate::geometry::ActionSet;
use crate::rng::Rng;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LqrSpec {
    pub n: usize,
    pub m: usize,
    /// Row-major `n x n` dynamics matrix.
    pub a: Vec<f64>,
    /// Row-major `n x m` input matrix.
    pub b: Vec<f64>,
    /// Row-major `n x n` PSD state cost.
    pub qc: Vec<f64>,
    /// Row-major `m x m` PD input cost.
    pub rc: Vec<f64>,
    /// Isotropic process noise standard deviation.
    pub noise_std: f64,
    pub gamma: f64,
    /// Instantaneous cost is clipped at this bound.
    pub cost_clip: f64,
    /// Componentwise action bounds.
    pub action_low: f64,
    pub action_high: f64,
    /// Initial state standard deviation.
    pub init_std: f64,
    pub episode_cap: usize,
}

impl LqrSpec {
    /// The default 4-state/2-input instance: two lightly damped rotational
    /// modes, stable in open loop but clearly improvable by feedback.
    pub fn default_4dim() -> Self {
        let (c1, s1) = (0.3f64.cos(), 0.3f64.sin());
        let (c2, s2) = (0.7f64.cos(), 0.7f64.sin());
        let r1 = 0.97;
        let r2 = 0.95;
        #[rustfmt::skip]
        let a = vec![
            r1 * c1, -r1 * s1, 0.0,      0.0,
            r1 * s1,  r1 * c1, 0.0,      0.0,
            0.0,      0.0,     r2 * c2, -r2 * s2,
            0.0,      0.0,     r2 * s2,  r2 * c2,
        ];
        #[rustfmt::skip]
        let b = vec![
            1.0, 0.0,
            0.0, 0.0,
            0.0, 1.0,
            0.0, 0.0,
        ];
        let qc = identity_flat(4);
        let rc = scaled_identity_flat(2, 0.1);
        Self {
            n: 4,
            m: 2,
            a,
            b,
            qc,
            rc,
            noise_std: 0.1,
            gamma: 0.95,
            cost_clip: 1e3,
            action_low: -3.0,
            action_high: 3.0,
            init_std: 1.0,
            episode_cap: 1000,
        }
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.a)
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.m, &self.b)
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.qc)
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.m, &self.rc)
    }
}

fn identity_flat(n: usize) -> Vec<f64> {
    scaled_identity_flat(n, 1.0)
}

fn scaled_identity_flat(n: usize, s: f64) -> Vec<f64> {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = s;
    }
    v
}

/// One LQR transition: `x' = A x + B u + w`, `w ~ N(0, noise_std^2 I)`;
/// cost `x' Qc x + u' Rc u`, clipped at `cost_clip`.
pub fn lqr_step(spec: &LqrSpec, x: &[f64], u: &[f64], rng: &mut Rng) -> (Vec<f64>, f64) {
    let a = spec.a_matrix();
    let b = spec.b_matrix();
    let xv = DVector::from_row_slice(x);
    let uv = DVector::from_row_slice(u);
    let mut next = &a * &xv + &b * &uv;
    if spec.noise_std > 0.0 {
        for i in 0..spec.n {
            let z: f64 = StandardNormal.sample(rng);
            next[i] += spec.noise_std * z;
        }
    }
    let cost = (xv.transpose() * spec.q_matrix() * &xv)[(0, 0)]
        + (uv.transpose() * spec.r_matrix() * &uv)[(0, 0)];
    (next.data.into(), cost.min(spec.cost_clip))
}

/// Solves the discounted discrete algebraic Riccati equation by fixed-point
/// iteration on `P = Q + g A'PA - g^2 A'PB (R + g B'PB)^{-1} B'PA` where
/// `g` is the discount. Converges for stabilizable discounted systems.
pub fn dare_fixed_point(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
) -> Result<DMatrix<f64>> {
    let sq = gamma.sqrt();
    let ad = a.scale(sq);
    let bd = b.scale(sq);
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btpb = bd.transpose() * &p * &bd;
        let inner = (r + btpb)
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("singular R + B'PB in Riccati".into()))?;
        let next = q + ad.transpose() * &p * &ad
            - ad.transpose() * &p * &bd * inner * bd.transpose() * &p * &ad;
        let diff = (&next - &p).abs().max();
        p = next;
        if diff < 1e-12 {
            // symmetrize against accumulated rounding
            p = (&p + p.transpose()).scale(0.5);
            return Ok(p);
        }
    }
    Err(Error::ConvergenceFailure {
        context: "Riccati fixed point".into(),
        iterations: 100_000,
        residual: f64::NAN,
        best: vec![],
    })
}

/// Optimal discounted state feedback `u = -K x` for the Riccati solution.
pub fn lqr_gain(spec: &LqrSpec) -> Result<DMatrix<f64>> {
    let a = spec.a_matrix();
    let b = spec.b_matrix();
    let p = dare_fixed_point(&a, &b, &spec.q_matrix(), &spec.r_matrix(), spec.gamma)?;
    let btpb = b.transpose() * &p * &b;
    let inner = (spec.r_matrix() + btpb.scale(spec.gamma))
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("singular feedback system".into()))?;
    Ok(inner * b.transpose().scale(spec.gamma) * &p * &a)
}

/// Sampled LQR environment over a box action set.
pub struct LqrEnv {
    pub spec: LqrSpec,
}

impl LqrEnv {
    pub fn new(spec: LqrSpec) -> Self {
        Self { spec }
    }

    pub fn action_set(&self) -> ActionSet {
        ActionSet::Box {
            lower: vec![self.spec.action_low; self.spec.m],
            upper: vec![self.spec.action_high; self.spec.m],
        }
    }
}

impl Environment for LqrEnv {
    fn state_dim(&self) -> usize {
        self.spec.n
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(self.action_set())
    }

    fn cost_bound(&self) -> f64 {
        self.spec.cost_clip
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.spec.n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.spec.init_std * z
            })
            .collect()
    }

    fn step(&self, state: &[f64], action: &EnvAction, rng: &mut Rng) -> (Vec<f64>, f64) {
        let u = match action {
            EnvAction::Vector(u) => u.as_slice(),
            EnvAction::Index(_) => panic!("LQR expects continuous actions"),
        };
        lqr_step(&self.spec, state, u, rng)
    }

    fn discount(&self) -> f64 {
        self.spec.gamma
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng as _;

    #[test]
    fn zero_dynamics_zero_noise_goes_to_origin() {
        let mut spec = LqrSpec::default_4dim();
        spec.a = vec![0.0; 16];
        spec.b = vec![0.0; 8];
        spec.noise_std = 0.0;
        let mut rng = stream_rng(0, 0);
        let (x, _) = lqr_step(&spec, &[1.0, -2.0, 3.0, 0.5], &[0.3, -0.3], &mut rng);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn origin_with_zero_input_costs_nothing() {
        let mut spec = LqrSpec::default_4dim();
        spec.noise_std = 0.0;
        let mut rng = stream_rng(0, 0);
        let mut x = vec![0.0; 4];
        for _ in 0..10 {
            let (nx, c) = lqr_step(&spec, &x, &[0.0, 0.0], &mut rng);
            assert_eq!(c, 0.0);
            x = nx;
            assert!(x.iter().all(|&v| v == 0.0));
        }
    }

    fn discounted_cost_under_gain(
        spec: &LqrSpec,
        k: &DMatrix<f64>,
        seed: u64,
        episodes: usize,
        horizon: usize,
    ) -> f64 {
        let env = LqrEnv::new(spec.clone());
        let mut total = 0.0;
        for e in 0..episodes {
            let mut rng = stream_rng(seed, e as u64);
            let mut x = env.reset(&mut rng);
            let mut disc = 1.0;
            let mut ret = 0.0;
            for _ in 0..horizon {
                let xv = DVector::from_row_slice(&x);
                let u = -(k * xv);
                let u: Vec<f64> =
                    u.iter().map(|&v| v.clamp(spec.action_low, spec.action_high)).collect();
                let (nx, c) = lqr_step(spec, &x, &u, &mut rng);
                ret += disc * c;
                disc *= spec.gamma;
                x = nx;
            }
            total += ret;
        }
        total / episodes as f64
    }

    #[test]
    fn riccati_feedback_beats_zero_policy() {
        let spec = LqrSpec::default_4dim();
        let k = lqr_gain(&spec).unwrap();
        let zero = DMatrix::<f64>::zeros(spec.m, spec.n);
        let with_k = discounted_cost_under_gain(&spec, &k, 5, 40, 300);
        let without = discounted_cost_under_gain(&spec, &zero, 5, 40, 300);
        assert!(with_k < without, "riccati {with_k} vs zero {without}");
    }

    #[test]
    fn riccati_feedback_beats_random_feedback_on_noiseless_instances() {
        // 20 random stable instances, noiseless limit sanity.
        let mut tried = 0;
        let mut seed = 0u64;
        while tried < 20 {
            seed += 1;
            let mut rng = stream_rng(seed, 9);
            let n = 3;
            let m = 2;
            let mut a = vec![0.0; n * n];
            for v in &mut a {
                *v = rng.gen::<f64>() * 0.8 - 0.4;
            }
            let mut b = vec![0.0; n * m];
            for v in &mut b {
                *v = rng.gen::<f64>() * 1.0 - 0.5;
            }
            let spec = LqrSpec {
                n,
                m,
                a,
                b,
                qc: identity_flat(n),
                rc: scaled_identity_flat(m, 0.2),
                noise_std: 0.0,
                gamma: 0.95,
                cost_clip: 1e6,
                action_low: -50.0,
                action_high: 50.0,
                init_std: 1.0,
                episode_cap: 200,
            };
            let k = match lqr_gain(&spec) {
                Ok(k) => k,
                Err(_) => continue,
            };
            let mut rand_k = DMatrix::<f64>::zeros(m, n);
            for i in 0..m {
                for j in 0..n {
                    rand_k[(i, j)] = rng.gen::<f64>() * 0.6 - 0.3;
                }
            }
            let c_opt = discounted_cost_under_gain(&spec, &k, seed, 10, 200);
            let c_rand = discounted_cost_under_gain(&spec, &rand_k, seed, 10, 200);
            assert!(
                c_opt <= c_rand + 1e-9,
                "seed {seed}: riccati {c_opt} vs random {c_rand}"
            );
            tried += 1;
        }
    }

    #[test]
    fn dare_solution_satisfies_the_equation() {
        let spec = LqrSpec::default_4dim();
        let a = spec.a_matrix().scale(spec.gamma.sqrt());
        let b = spec.b_matrix().scale(spec.gamma.sqrt());
        let q = spec.q_matrix();
        let r = spec.r_matrix();
        let p = dare_fixed_point(&spec.a_matrix(), &spec.b_matrix(), &q, &r, spec.gamma).unwrap();
        let inner = (&r + b.transpose() * &p * &b).try_inverse().unwrap();
        let rhs = &q + a.transpose() * &p * &a
            - a.transpose() * &p * &b * inner * b.transpose() * &p * &a;
        assert!((&p - rhs).abs().max() < 1e-9);
    }
}

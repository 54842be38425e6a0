//! Policy optimization solvers for Markov decision processes.
//!
//! The crate implements two families of policy-gradient-type methods over
//! tabular, general-state/finite-action, and general-state/continuous-action
//! problems:
//!
//! * **Policy mirror descent** ([`pmd`]): per-iteration proximal step on the
//!   advantage function, anchored at the current policy through a Bregman
//!   divergence.
//! * **Policy dual averaging** ([`pda`]): per-iteration minimization of the
//!   weighted sum of all past action-value functions, anchored at the fixed
//!   initial policy.
//!
//! Both come in an exact tabular mode (closed-form policy evaluation via
//! linear solves) and a function-approximation mode backed by random-feature
//! ridge regression ([`eval`]). Environments ([`env`]) include a trap
//! grid world, a random tabular MDP generator, a discrete-time LQR, and an
//! ODE pendulum.
//!
//! Bulk inner loops (per-state proximal sweeps, Monte Carlo rollouts,
//! dataset collection) run on rayon when the `parallel` feature is enabled
//! (default) and fall back to sequential loops otherwise. The `_seq`
//! variants of those entry points stay available either way so the two
//! paths can be compared directly; outputs are identical regardless of
//! thread count.

pub mod env;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mdp;
pub mod pda;
pub mod pmd;
pub mod rng;
pub mod schedule;
pub mod trace;

pub use error::{Error, Result};

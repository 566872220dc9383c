//! A desk-scale laboratory for training critique policies with staged,
//! KL-regularized policy-gradient RL against a finite synthetic task
//! family.
//!
//! The pieces, bottom-up:
//!
//! * [`env`] — the synthetic task family: a fixed actor that answers and
//!   refines, a ground-truth verifier, and full
//!   response-critique-refinement rollouts. Small enough that every
//!   expectation is exactly enumerable.
//! * [`policy`] — the trainable critic: a tabular softmax policy over
//!   (verdict, hint) critique actions per (question, answer) context.
//! * [`rewards`] — the critique reward variants (refine / delta /
//!   correction / dis / stage2 composite / continuous-dis).
//! * [`optim`] — maximum-likelihood initialization, exact enumeration
//!   objective and gradient, REINFORCE and leave-one-out estimators,
//!   gradient ascent.
//! * [`metrics`] — the five critique metrics, their exact expectations,
//!   and majority-vote / pass-rate scaling estimators.
//! * [`pipeline`] — staged training runs and dynamics logging.
//! * [`cli`] — experiment configuration, run orchestration and file
//!   formats behind the `critic-lab` binary.
//!
//! Core math is generic over the floating-point [`Scalar`]; the aliases
//! below pin the `f64` instantiation used by the CLI and the reference
//! experiments.

pub mod cli;
pub mod env;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` instantiations of the core types.
pub type TaskSpec64 = env::TaskSpec<f64>;
pub type RefineParams64 = env::RefineParams<f64>;
pub type CriticPolicy64 = policy::CriticPolicy<f64>;
pub type PolicySnapshot64 = policy::PolicySnapshot<f64>;
pub type RewardFn64 = rewards::RewardFn<f64>;
pub type Objective64 = optim::Objective<f64>;
pub type GradEstimate64 = optim::GradEstimate<f64>;
pub type MetricsReport64 = metrics::MetricsReport<f64>;
pub type StageConfig64 = pipeline::StageConfig<f64>;
pub type DynamicsLog64 = pipeline::DynamicsLog<f64>;

//! Feature-perturbation exploration for generalized linear contextual
//! bandits, with the baselines it is usually compared against.
//!
//! A run wires the pieces together like this:
//!
//! ```
//! use fp_bandits::{rng, Algorithm, EnvConfig, Environment, LinkSpec, Policy, PolicyConfig};
//!
//! let env_cfg = EnvConfig::new(LinkSpec::linear(), 3, 5, 50, 1.0);
//! let mut env = Environment::generate(env_cfg, rng::stream(7, rng::INSTANCE_STREAM)).unwrap();
//! let mut rewards = rng::stream(7, rng::REWARD_STREAM);
//! let cfg = PolicyConfig::new(Algorithm::Fp, LinkSpec::linear());
//! let mut policy = Policy::new(cfg, 3, 50, rng::stream(7, rng::POLICY_STREAM)).unwrap();
//! let mut regret = 0.0;
//! for _ in 0..50 {
//!     let actions = env.next_actions();
//!     let arm = policy.select(&actions).unwrap();
//!     let r = env.step(&actions, arm, &mut rewards).unwrap();
//!     regret += env.regret_of(&actions, arm).unwrap();
//!     policy.update(actions.get(arm), r).unwrap();
//! }
//! assert!(regret >= 0.0);
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod estimation;
pub mod glm;
pub mod linalg;
pub mod perturbation;
pub mod policy;
pub mod rng;
pub mod verification;

pub use env::{ActionSet, ContextMode, EnvConfig, Environment, FeatureNormalization, RegretTrace, TraceRecord};
pub use estimation::{fit_mle, ConfidenceParams, EstimationError, EstimatorState, History};
pub use glm::{LinkKind, LinkSpec};
pub use linalg::{SpdFactor, SymMatrix};
pub use perturbation::{Coupling, PerturbationDistribution, PerturbationScheme};
pub use policy::{Algorithm, CtMode, Policy, PolicyConfig, PolicyError};
pub use verification::OracleReport;

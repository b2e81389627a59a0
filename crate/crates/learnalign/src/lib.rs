//! Gradient-alignment data selection for RL post-training, end to end at
//! desk scale: a token-level MDP over synthetic arithmetic tasks with
//! rule-based verifiable rewards, a small autoregressive policy with exact
//! analytic gradients, a GRPO trainer, projected per-datum gradient
//! features, learnability-weighted alignment scoring with top-N and staged
//! selection, reference baseline selectors, and an experiment pipeline that
//! compares them.
//!
//! The selection pipeline has four steps:
//!
//! 1. warmup-train the policy on a small random subset (gradient probe),
//! 2. per datum, estimate the GRPO gradient from G rollouts and the success
//!    rate p, then sketch the gradient with a seeded random projection,
//! 3. form the pairwise score matrix S_ij = p_i(1-p_i) p_j(1-p_j)
//!    cos(phi_i, phi_j),
//! 4. rank data by row-average score and keep the top N.
//!
//! See the `experiment` module for the CLI-facing orchestration.

pub mod baselines;
mod binio;
pub mod error;
pub mod experiment;
pub mod features;
pub mod grpo;
pub mod mdp_env;
pub mod policy;
pub mod scoring;
pub mod seeding;

pub use error::{Error, Result};

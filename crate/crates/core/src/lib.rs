//! Off-policy learning of continuous treatment policies over belief states.
//!
//! The pipeline: a Gaussian mixture turns observations into latent-state
//! posteriors ([`gmm`]); a discrete POMDP with smoothed transition tables is
//! built on top of it ([`belief_model`]); an anytime bounded search tree
//! plans from each belief ([`bounded_tree`]); and a Gaussian actor with linear
//! lower/upper bound critics is trained from logged episodes ([`agent`]).
//! [`synth_env`] generates benchmark data with a known optimal policy.

// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod belief_model;
pub mod bounded_tree;
pub mod episode_store;
pub mod gmm;
pub mod seed;
pub mod synth_env;
pub mod testkit;
pub mod textfmt;

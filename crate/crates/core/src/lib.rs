//! Gradient reconstruction attacks and optimal gradient defenses for
//! federated learning, at desk scale.
//!
//! * [`nn`] is a small network engine exposing `L(x, Θ)`, `∇_Θ L` and `∇_x L`.
//! * [`probe`] estimates the per-parameter input sensitivities `‖∇_x g_i‖²`.
//! * [`defense`] holds the gradient noise, DP-SGD and pruning defenses and
//!   their locally optimal variants.
//! * [`bounds`] evaluates Fisher traces, the reconstruction-error lower bound
//!   and the utility measures.
//! * [`attack`] is a gradient-matching reconstruction attack.
//! * [`fl`] simulates federated training and privacy/utility sweeps.
//! * [`data`] covers datasets, configuration and metric files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod bounds;
pub mod data;
pub mod defense;
pub mod error;
pub mod fl;
pub mod nn;
pub mod probe;
pub mod rng;

pub use error::{Error, ErrorCategory, Result};

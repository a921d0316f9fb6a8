//! Numerical core for expert-mixture feed-forward layers.
//!
//! The crate implements two mathematically related ways to apply a routed
//! bank of affine experts to a sequence of token vectors:
//!
//! * output mixing: run every selected expert, then sum the outputs under
//!   the gate scores ([`moe::MoeLayer`]);
//! * parameter merging: sum the expert weights and biases under the gate
//!   scores first, then run the single merged expert once
//!   ([`meo::MeoLayer`]).
//!
//! With the activation applied outside the experts the two are the same
//! function, and the merged form does the expert work once instead of m
//! times. The crate carries everything needed to check and quantify that
//! claim: exact forward gradients for both paths ([`moe`], [`meo`]), slow
//! reference implementations and finite-difference checks ([`oracle`]), an
//! exact integer FLOPs model for whole transformer-shaped models ([`cost`]),
//! a wall-clock benchmark over standalone kernels ([`bench`]), and a small
//! synthetic training loop that exercises the backward paths end to end
//! ([`train`]). [`runner`] packages each of those as a reproducible run
//! mode configured by [`config::RunConfig`].

pub mod bench;
pub mod config;
pub mod cost;
pub mod error;
pub mod expert;
pub mod gating;
pub mod meo;
pub mod moe;
pub mod oracle;
pub mod runner;
pub mod tensor;
pub mod train;

pub use config::{Mode, Precision, RunConfig, ToyOptions};
pub use cost::{CostReport, ModelProfile, ModelVariant, Overheads};
pub use error::{Error, Result};
pub use expert::{ActivationKind, ActivationPlacement, ExpertBank};
pub use gating::{GateDecision, GateLevel, GateParams, GateTrace};
pub use meo::{merge_experts, BottleneckBlock, MeoLayer, MergedExpert};
pub use moe::{LayerGradients, MoeLayer};
pub use oracle::{equivalence_gap, finite_diff_grad, EquivalenceReport, GradReport};
pub use runner::{execute, ModeOutput};
pub use tensor::{Matrix2D, Rng};

//! Multitask learning over crowd-sourced labels with loss-based correction.
//!
//! Each annotator gets a private softmax head over a shared encoder; missing
//! annotations contribute nothing to loss or gradients. Per-sample losses are
//! modeled with a two-component Beta mixture, and the posterior probability
//! of the high-loss component becomes a per-sample weight that blends the
//! annotator's label with the model's own (detached) prediction. The blend
//! strength is scaled by a global factor `psi`.
//!
//! Modules:
//! - [`data`]: sparse annotation matrices, majority votes, JSONL I/O
//! - [`rng`]: deterministic seed derivation and named RNG streams
//! - [`loss`]: cross-entropy, multitask aggregation, label-correction terms
//! - [`model`]: MLP encoder + per-annotator heads, analytic gradients, mixup
//! - [`mixture`]: Beta mixture EM over normalized losses, correction weights
//! - [`synth`]: faction-structured synthetic datasets and label noise
//! - [`metrics`]: F1, annotator accuracy, prediction variance, reports
//! - [`train`]: SGD training loop, warm-up schedule, psi sweeps
//! - [`config`]: key=value config files, overrides, config hashing

pub mod config;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use data::{DataError, Dataset};

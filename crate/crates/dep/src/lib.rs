//! Training-free decoding calibration for vision-language decoders.
//!
//! The library implements a per-step closed loop around an autoregressive
//! decoder: build a small set of semantics-preserving textual perturbations
//! of the prompt, measure how the model's attention and logits move under
//! them, and use those measurements to (a) re-anchor the hidden state on
//! stable visual evidence while suppressing unstable regions and (b) subtract
//! the language-prior drift direction from the logits before the greedy pick.
//!
//! Modules, bottom up:
//!
//! - [`core`]: shared domain types (vocab, prompts, image grids, vectors) and
//!   the softmax/argmax primitives.
//! - [`probe`]: perturbation strategies, the effective-sample-size scheduler,
//!   and lexicon resources.
//! - [`decouple`]: attention moments, confidence bounds, region masks,
//!   blur-ablation, and hidden-state calibration.
//! - [`drift`]: the prior-drift direction and the logit penalty.
//! - [`engine`]: the decode loop tying the above together, with step traces.
//! - [`mockvlm`]: a fully deterministic mock vision-language model with an
//!   exact evidence/prior/constant logit decomposition, used as the test and
//!   benchmark substrate.
//! - [`bench`]: object-existence suites, metrics, ablation and sweep drivers,
//!   and run persistence.
//! - [`config`]: the flat `key = value` config format shared with the CLI.

pub mod bench;
pub mod config;
pub mod core;
pub mod decouple;
pub mod drift;
pub mod engine;
mod error;
pub mod mockvlm;
pub mod probe;
mod stablehash;

pub use error::{DepError, Result};

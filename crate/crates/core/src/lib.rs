//! Desk-scale speech-to-text policy laboratory.
//!
//! A self-contained pipeline over a synthetic noisy-channel task: a minimal
//! reverse-mode autodiff engine, a small causal decoder-only policy over
//! acoustic frames and text tokens, word-level alignment and rule-based
//! rewards, supervised fine-tuning, and group relative policy optimization
//! (with its decoupled-clip/token-level and length-bias-free variants).

pub mod align;
pub mod data;
pub mod eval;
pub mod model;
pub mod rewards;
pub mod rl;
pub mod rng;
pub mod tensor;
pub mod train;

#[doc(hidden)]
pub mod testsupport;

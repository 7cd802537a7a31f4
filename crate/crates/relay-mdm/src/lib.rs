//! Masked diffusion over Sudoku boards with a learned relay state.
//!
//! The crate trains a small rotary Transformer to fill 9x9 Sudoku boards by
//! iterative unmasking. Alongside the committed tokens, the model can carry a
//! per-position hidden state (the relay) from one denoising pass into the
//! next, trained end-to-end by backpropagating through a K-step rollout
//! window. Four training objectives form an ablation ladder:
//!
//! * `mlm`: uniform masking, one forward pass per step, no relay;
//! * `rollout`: K-step on-policy rollouts with teacher forcing, no relay;
//! * `relay_sg`: rollouts with the relay carried but its gradient severed
//!   between steps;
//! * `relay`: rollouts with full backpropagation through the relay.
//!
//! Supporting machinery: a strategy-tagging Sudoku solver for dataset
//! annotation and cohort slicing, a confidence-threshold unmasking policy,
//! an accuracy / NFE / legality evaluation harness with threshold sweeps,
//! and a finite-difference gradient checker.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod sudoku;
pub mod training;

pub use error::{Error, Result};

//! Two-stage EEG representation learning at desk scale.
//!
//! Stage 1 ([`tokenizer`]) turns 1-second EEG patches into a pair of
//! discrete tokens, one from a temporal codebook and one from a frequency
//! codebook. Stage 2 ([`ssm`], [`pretrain`]) trains a backbone of
//! structured-global-convolution + sliding-window-attention blocks to
//! predict the tokens of masked patches. [`probe`] evaluates the frozen
//! backbone with a small classification head.
//!
//! Everything runs on a small reverse-mode autodiff engine in
//! [`numerics`]; no external tensor library is involved.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod pretrain;
pub mod probe;
pub mod signal;
pub mod ssm;
pub mod tokenizer;

pub use error::{Error, Result};

//! Policy-violation detection by prompting a small frozen language model.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, the CLI and the review service live in the
//! `policyprobe` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod model;
pub mod optim;
pub mod parser;
pub mod pretrain;
pub mod prompt;
pub mod real;
pub mod scorer;
pub mod synth;
pub mod tokenizer;
pub mod tuner;

pub use error::{Error, Result};
pub use model::{FrozenModel, ModelConfig, Transformer};
pub use tokenizer::{TokenId, Tokenizer};

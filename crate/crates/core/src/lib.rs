// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept-supervised sparse autoencoders over a small convolutional
//! classifier.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, the CLI and the HTTP service live in the
//! companion `csae-workbench` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod aggregator;
pub mod autodiff;
pub mod conv;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod free;
pub mod intervention;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod real;
pub mod tensor;
pub mod tokenizer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use optim::{AdamState, Parameters, StepLrSchedule};
pub use real::Real;
pub use tensor::Tensor;

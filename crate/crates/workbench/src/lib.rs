// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats, command-line plumbing and the local HTTP API for
//! `csae-core`.

pub mod atomic;
pub mod checkpoint;
pub mod dataset;
pub mod dump;
pub mod error;
pub mod lock;
pub mod provenance;
pub mod reports;
pub mod service;

pub use error::{Result, WorkbenchError};

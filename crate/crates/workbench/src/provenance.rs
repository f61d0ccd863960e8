// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Embedded in every artifact the CLI writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of the producing configuration.
    pub config_hash: String,
    pub code_version: String,
}

impl Provenance {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Self {
        Self {
            command: command.to_owned(),
            seed,
            config_hash: config_hash(config),
            code_version: CODE_VERSION.to_owned(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash<C: Serialize>(config: &C) -> String {
    let canonical = serde_json::to_value(config).and_then(|v| serde_json::to_vec(&v)).unwrap_or_default();
    sha256_hex(&canonical)
}

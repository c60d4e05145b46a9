//! Run manifests.
//!
//! The hash covers the tool version, the command and the resolved inputs,
//! serialized as canonical JSON (sorted keys, no whitespace). Timestamps
//! live beside the hash but never feed into it.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const TOOL: &str = "tokenq";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// JSON with object keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's Value map is a BTreeMap without `preserve_order`.
    let v = serde_json::to_value(value).map_err(|e| CliError::Numerical(format!("canonical form: {e}")))?;
    Ok(v.to_string())
}

#[derive(Debug, Clone, Serialize)]
struct Hashed<'a, T: Serialize> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    inputs: &'a T,
}

/// Hash identifying `(command, inputs)` for this tool version.
pub fn run_hash<T: Serialize>(command: &str, inputs: &T) -> Result<String> {
    let doc = Hashed { tool: TOOL, version: VERSION, command, inputs };
    Ok(sha256_hex(canonical_json(&doc)?.as_bytes()))
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timestamps {
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub manifest_hash: &'a str,
    pub seed: Option<u64>,
    pub inputs: &'a T,
    pub outputs: Vec<OutputEntry>,
    /// Excluded from `manifest_hash`.
    pub timestamps: Timestamps,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a = serde_json::json!({"x": 1, "y": {"b": 2, "a": 3}});
        let b: serde_json::Value = serde_json::from_str(r#"{"y": {"a": 3, "b": 2}, "x": 1}"#).unwrap();
        assert_eq!(run_hash("analyze", &a).unwrap(), run_hash("analyze", &b).unwrap());
        assert_ne!(run_hash("analyze", &a).unwrap(), run_hash("simulate", &a).unwrap());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}

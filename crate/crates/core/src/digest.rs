//! Content digests of run configurations.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// SHA-256 (hex) of the canonical JSON form of `value`: object keys sorted,
/// no insignificant whitespace.
pub fn config_digest<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Short prefix for file names and log lines.
pub fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

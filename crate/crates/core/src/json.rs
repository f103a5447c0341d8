//! Canonical JSON: object keys sorted, two-space indentation, trailing newline.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn to_canonical_string<S: Serialize>(value: &S) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap, so a round trip
    // through it sorts them.
    let v = serde_json::to_value(value).map_err(|e| Error::json("<memory>", e))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::json("<memory>", e))?;
    s.push('\n');
    Ok(s)
}

pub fn write_canonical<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let s = to_canonical_string(value)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

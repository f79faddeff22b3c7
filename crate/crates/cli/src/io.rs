//! Signals on disk are raw little-endian `f64` with no header.

use std::fs;
use std::path::Path;

use crate::error::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_signal(path: &Path) -> Result<Vec<f64>, CliError> {
    let bytes = read_bytes(path)?;
    if bytes.is_empty() || bytes.len() % 8 != 0 {
        return Err(CliError::Format(format!(
            "{}: {} bytes is not a nonempty whole number of f64 values",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn signal_bytes(x: &[f64]) -> Vec<u8> {
    x.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_signal(path: &Path, x: &[f64]) -> Result<(), CliError> {
    write_bytes(path, &signal_bytes(x))
}

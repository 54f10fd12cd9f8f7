//! Files: IDX datasets, model files and run configuration.

pub mod config;
pub mod idx;
pub mod model;

use std::path::Path;

use crate::error::Result;

/// `std::fs::read` with the path in the error message.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| with_path(path, e).into())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| with_path(path, e).into())
}

fn with_path(path: &Path, e: std::io::Error) -> std::io::Error {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

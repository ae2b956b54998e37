use std::io::Write;
use std::path::Path;

use crate::error::{GraftError, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// reader never observes a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| GraftError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| GraftError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| GraftError::io(path, e))?;
    tmp.persist(path).map_err(|e| GraftError::io(path, e.error))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| GraftError::io(path, e))
}

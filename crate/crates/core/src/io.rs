//! Shared file plumbing: atomic writes and format-version checks.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Accepts `major.minor` versions whose major does not exceed `supported`.
pub fn check_version(found: &str, supported_major: u32) -> Result<()> {
    let major = found
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok())
        .ok_or_else(|| Error::invalid(format!("malformed format version `{found}`")))?;
    if major > supported_major {
        return Err(Error::Version {
            found: found.into(),
            supported: format!("{supported_major}.x"),
        });
    }
    Ok(())
}

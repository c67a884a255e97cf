//! File output helpers: atomic writes and provenance headers.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to a temporary file in the target directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// `#`-prefixed header lines recording the command, config digest and seed.
pub fn provenance_header(command: &str, config_hash: &str, seed: u64) -> String {
    format!("# casematch {command}\n# config_hash={config_hash} seed={seed}\n")
}

/// Drops leading `#` comment lines from CSV-like text.
pub fn strip_comments(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#'))
}

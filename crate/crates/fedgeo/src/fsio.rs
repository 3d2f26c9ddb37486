//! Small filesystem helpers shared by dataset caching and experiment output.

use std::fs;
use std::io;
use std::path::Path;

/// Writes a file atomically: contents go to a sibling temp file which is
/// then renamed over the target, so readers never observe a partial write.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    write_atomic_bytes(path, contents.as_bytes())
}

pub fn write_atomic_bytes(path: &Path, contents: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

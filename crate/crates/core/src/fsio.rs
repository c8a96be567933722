//! Atomic file and directory publication.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Write `bytes` to a temporary sibling and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = parent_of(path);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Populate a fresh temporary directory with `fill`, then move it to
/// `target`. An existing `target` is replaced only if `replaceable` accepts it.
pub fn publish_dir(target: &Path, replaceable: impl Fn(&Path) -> bool, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if target.exists() {
        let empty = target.is_dir() && fs::read_dir(target).map_err(|e| Error::io(target, e))?.next().is_none();
        if !empty && !replaceable(target) {
            return Err(Error::invalid(format!("{} exists and is not replaceable", target.display())));
        }
    }
    let parent = parent_of(target);
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    fill(staging.path())?;
    if target.exists() {
        fs::remove_dir_all(target).map_err(|e| Error::io(target, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, target).map_err(|e| Error::io(target, e))?;
    Ok(())
}

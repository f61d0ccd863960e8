// SPDX-License-Identifier: MIT OR Apache-2.0

//! Write-to-temp, fsync, rename.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::error::{Result, WorkbenchError};

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

fn sync_dir(dir: &Path) {
    // not every platform can open a directory for syncing
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

fn parent(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Create `path` through `fill`; on any error the destination is untouched
/// and the temporary file is removed.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut File) -> Result<()>) -> Result<()> {
    let dir = parent(path);
    fs::create_dir_all(dir).map_err(WorkbenchError::io(dir))?;
    let tmp = sibling(path, "tmp");
    let result = (|| {
        let mut f = File::create(&tmp).map_err(WorkbenchError::io(&tmp))?;
        fill(&mut f)?;
        f.sync_all().map_err(WorkbenchError::io(&tmp))?;
        drop(f);
        fs::rename(&tmp, path).map_err(WorkbenchError::io(path))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    } else {
        sync_dir(dir);
    }
    result
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    write_atomic(path, |f| f.write_all(bytes).map_err(WorkbenchError::io(path)))
}

/// Build a directory at a temporary sibling and move it into place,
/// replacing any previous directory at `path`.
pub fn write_dir_atomic(path: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = parent(path);
    fs::create_dir_all(dir).map_err(WorkbenchError::io(dir))?;
    let tmp = sibling(path, "tmp");
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir(&tmp).map_err(WorkbenchError::io(&tmp))?;
    let result = fill(&tmp).and_then(|()| {
        let old = sibling(path, "old");
        let had_old = path.exists();
        if had_old {
            fs::rename(path, &old).map_err(WorkbenchError::io(path))?;
        }
        fs::rename(&tmp, path).map_err(WorkbenchError::io(path))?;
        if had_old {
            let _ = fs::remove_dir_all(&old);
        }
        Ok(())
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    } else {
        sync_dir(dir);
    }
    result
}

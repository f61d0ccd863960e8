// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exclusive finetune lock, a file created with `O_EXCL` in the data root.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Result, WorkbenchError};

pub const LOCK_FILE: &str = "finetune.lock";

pub fn lock_path(root: &Path) -> PathBuf {
    root.join(LOCK_FILE)
}

pub fn is_locked(root: &Path) -> bool {
    lock_path(root).exists()
}

/// Held for the duration of a finetune; the file is removed on drop.
#[derive(Debug)]
pub struct FinetuneLock {
    path: PathBuf,
}

impl FinetuneLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(WorkbenchError::io(root))?;
        let path = lock_path(root);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(WorkbenchError::Locked(path)),
            Err(e) => return Err(WorkbenchError::io(&path)(e)),
        };
        writeln!(f, "{}", std::process::id()).map_err(WorkbenchError::io(&path))?;
        Ok(Self { path })
    }
}

impl Drop for FinetuneLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

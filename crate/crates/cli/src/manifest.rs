//! Run manifest and output-directory lock.
//!
//! The manifest is a single sorted `key = value` file. Each stage owns a
//! key prefix and *replaces* its own section when it runs, so re-running
//! any stage — or the whole pipeline — rewrites the file to identical
//! bytes. Nothing time- or machine-dependent is ever recorded.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const LOCK_FILE: &str = ".ltlab.lock";

#[derive(Debug)]
pub struct Manifest {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Manifest {
    /// Loads the manifest in `out_dir`, or starts an empty one.
    pub fn load_or_empty(out_dir: &Path) -> Result<Manifest> {
        let path = out_dir.join(MANIFEST_FILE);
        let mut entries = BTreeMap::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    if line.is_empty() {
                        continue;
                    }
                    let (k, v) = line.split_once(" = ").ok_or_else(|| {
                        CliError::Numeric(format!(
                            "{} line {}: not a `key = value` entry",
                            path.display(),
                            i + 1
                        ))
                    })?;
                    entries.insert(k.to_string(), v.to_string());
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(Manifest { path, entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let value = value.into();
        debug_assert!(!value.contains('\n'), "manifest values must be single-line");
        self.entries.insert(key.into(), value);
    }

    /// Drops every key under `prefix` (exclusive ownership of a stage's
    /// section), so stale entries from earlier runs cannot linger.
    pub fn clear_section(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Rewrites the whole file: sorted keys, `key = value` lines.
    pub fn write(&self) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        std::fs::write(&self.path, out)?;
        Ok(())
    }
}

/// Exclusive hold on an output directory for the length of one stage.
///
/// Acquisition creates the lock file with `create_new`, so a second
/// concurrent invocation on the same directory is rejected; the file is
/// removed when the guard drops.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out_dir: &Path) -> Result<OutputLock> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(
                format!(
                    "output directory {} is locked by {} — another invocation is running \
                     (delete the file if it is stale)",
                    out_dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Errors out (exit 3) unless `path` exists, naming the stage that
/// produces it.
pub fn require_artifact(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!(
            "{} (run `{produced_by}` first)",
            path.display()
        )))
    }
}

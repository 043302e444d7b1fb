//! Run-directory plumbing: the exclusive training lock and the manifest.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use ovu_core::config::RunConfig;

pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug)]
pub struct LockHeld(pub PathBuf);

impl fmt::Display for LockHeld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run directory is locked by {}", self.0.display())
    }
}

impl std::error::Error for LockHeld {}

/// Held for the duration of a training command; removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(LockHeld(path).into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct Manifest;

impl Manifest {
    /// Appends one JSON line describing a finished command.
    pub fn record(dir: &Path, command: &str, cfg: &RunConfig, outputs: &[&Path]) -> Result<()> {
        let path = dir.join(MANIFEST);
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        let outputs: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
        let line = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "config": cfg,
            "outputs": outputs,
        });
        writeln!(f, "{line}")?;
        Ok(())
    }
}

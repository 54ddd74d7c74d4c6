//! Run directories: every artifact of one invocation lives under one folder.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliResult;

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `base/<label>-<UTC timestamp>`, adding a counter on collision.
    pub fn timestamped(base: &Path, label: &str) -> CliResult<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let mut path = base.join(format!("{label}-{stamp}"));
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = base.join(format!("{label}-{stamp}-{n}"));
        }
        Self::at(path)
    }

    /// Uses `path` as is, creating it when missing.
    pub fn at(path: PathBuf) -> CliResult<Self> {
        fs::create_dir_all(&path)?;
        Ok(RunDir { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn subdir(&self, name: &str) -> CliResult<RunDir> {
        RunDir::at(self.path.join(name))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let path = self.file(name);
        let mut text = serde_json::to_string_pretty(value).map_err(hessianscope::Error::from)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamped_dirs_never_collide() {
        let base = tempfile::tempdir().unwrap();
        let a = RunDir::timestamped(base.path(), "x").unwrap();
        let b = RunDir::timestamped(base.path(), "x").unwrap();
        assert_ne!(a.path(), b.path());
        assert!(a.path().starts_with(base.path()) && b.path().is_dir());
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Tracks files and directories a command creates and removes them unless
/// the command finishes successfully.
#[derive(Default)]
pub struct Outputs {
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Ensures `dir` exists, remembering it if this call created it.
    pub fn dir(&mut self, dir: &Path) -> Result<PathBuf> {
        if !dir.exists() {
            let top = dir
                .ancestors()
                .take_while(|a| !a.as_os_str().is_empty() && !a.exists())
                .last()
                .unwrap_or(dir)
                .to_path_buf();
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            self.created.push(top);
        }
        Ok(dir.to_path_buf())
    }

    /// Writes `contents` to `path`.
    pub fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        self.claim(path)?;
        fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
    }

    /// Registers a file that the caller is about to write.
    pub fn claim(&mut self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.dir(parent)?;
        }
        self.created.push(path.to_path_buf());
        Ok(())
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.created.iter().rev() {
            let _ = if p.is_dir() {
                fs::remove_dir_all(p)
            } else {
                fs::remove_file(p)
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("a/b");
        {
            let mut o = Outputs::default();
            o.write(&dir.join("x.txt"), "1").unwrap();
            assert!(dir.join("x.txt").exists());
        }
        assert!(!root.path().join("a").exists());
        let mut o = Outputs::default();
        o.write(&dir.join("x.txt"), "1").unwrap();
        o.commit();
        assert!(dir.join("x.txt").exists());
    }
}

//! Output directory handling: an exclusive lockfile and staged writes that
//! only become visible when the command succeeds.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use tissueseg::{Error, Result};

pub const LOCK_NAME: &str = ".tissueseg.lock";

pub struct OutputDir {
    dir: PathBuf,
    lock: PathBuf,
    staged: Vec<(PathBuf, PathBuf)>,
}

impl OutputDir {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        let lock = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(Error::Config(format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    dir.display(),
                    lock.display()
                )));
            }
            Err(e) => {
                return Err(Error::Config(format!("output directory {} is not writable: {e}", dir.display())));
            }
        }
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            lock,
            staged: Vec::new(),
        })
    }

    /// Path to write `name` to; it is renamed into place by `commit`.
    pub fn stage(&mut self, name: &str) -> Result<PathBuf> {
        let dest = self.dir.join(name);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = dest.with_file_name(format!(
            ".{}.partial",
            dest.file_name().and_then(|n| n.to_str()).unwrap_or("out")
        ));
        self.staged.push((tmp.clone(), dest));
        Ok(tmp)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let tmp = self.stage(name)?;
        fs::write(tmp, bytes)?;
        Ok(())
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let staged = std::mem::take(&mut self.staged);
        let mut out = Vec::with_capacity(staged.len());
        for (tmp, dest) in staged {
            fs::rename(&tmp, &dest)?;
            out.push(dest);
        }
        Ok(out)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
        let _ = fs::remove_file(&self.lock);
    }
}

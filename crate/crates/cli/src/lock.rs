//! Output-directory lock preventing two runs from interleaving writes.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const LOCK_NAME: &str = ".pointsculpt.lock";

/// Held for the duration of a run; the file disappears on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    /// Creates the output directory if needed and claims its lock file.
    pub fn acquire(output: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(output)
            .map_err(|e| CliError::io(format_args!("creating {}", output.display()), e))?;
        let path = output.join(LOCK_NAME);
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    CliError::Io(format!(
                        "output directory is locked by {}; remove the file if no other run is active",
                        path.display()
                    ))
                } else {
                    CliError::io(format_args!("creating lock {}", path.display()), e)
                }
            })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

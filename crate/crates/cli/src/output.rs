//! Output directories and files that appear all at once and are never
//! overwritten without `--force`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

fn occupied(path: &Path) -> bool {
    match fs::read_dir(path) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) => path.exists(),
    }
}

/// A directory filled under a hidden sibling name and renamed into place by
/// [`StagedDir::commit`].
pub struct StagedDir {
    target: PathBuf,
    staging: PathBuf,
}

impl StagedDir {
    pub fn create(target: &Path, force: bool) -> Result<Self, CliError> {
        if occupied(target) && !force {
            return Err(CliError::Exists(target.to_path_buf()));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("{} is not a directory name", target.display())))?;
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging)?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
        })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn commit(self) -> Result<PathBuf, CliError> {
        if self.target.is_dir() {
            fs::remove_dir_all(&self.target)?;
        } else if self.target.exists() {
            fs::remove_file(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)?;
        Ok(self.target)
    }
}

/// Writes `bytes` to `dir/name` through a temporary file.
pub fn write_file(dir: &Path, name: &str, bytes: &[u8], force: bool) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    if path.exists() && !force {
        return Err(CliError::Exists(path));
    }
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

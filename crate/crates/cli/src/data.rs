use std::path::{Path, PathBuf};

use softclu::{load_cloud, CloudFormat, PointCloud};
use walkdir::WalkDir;

use crate::exit::Failure;

/// Every `.off`, `.ply` and `.xyz` file under `dir`, in a stable order.
pub fn discover(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::data(format!("data directory {} does not exist", dir.display())));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Failure::data(format!("walking {}: {e}", dir.display())))?;
        if entry.file_type().is_file() && CloudFormat::from_path(entry.path()).is_some() {
            files.push(entry.into_path());
        }
    }
    if files.is_empty() {
        return Err(Failure::data(format!(
            "found 0 point-cloud files (.off, .ply, .xyz) in {}",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn load(path: &Path) -> Result<PointCloud, Failure> {
    let format = CloudFormat::from_path(path)
        .ok_or_else(|| Failure::data(format!("{}: unknown cloud format", path.display())))?;
    let cloud = load_cloud(path, format).map_err(|e| Failure::from(e).context(path.display().to_string()))?;
    Ok(cloud.with_name(path.display().to_string()))
}

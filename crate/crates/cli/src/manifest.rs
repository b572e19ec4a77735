use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{CliError, CliResult};

/// Everything needed to re-run a command: resolved config, dataset
/// fingerprint, seed, and the artifacts it produced.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    pub config_path: Option<PathBuf>,
    /// Every key the command read, defaults included.
    pub resolved: BTreeMap<String, String>,
    pub dataset: Option<PathBuf>,
    pub dataset_checksum: Option<String>,
    pub seed: u64,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub status: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: u64) -> Self {
        Self {
            command: command.into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            status: "ok".into(),
            ..Self::default()
        }
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.insert(name.into(), path.to_path_buf());
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        write_file(&path, &text)?;
        Ok(path)
    }
}

pub fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::other(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::other(format!("{}: {e}", path.display())))
}

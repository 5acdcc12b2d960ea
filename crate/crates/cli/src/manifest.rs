//! Run manifests. A manifest is written once, before any computation, and
//! names every file the command will produce relative to its directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_MANIFEST_FILE: &str = "error_manifest.json";

/// Content hash identifying the build that produced a run.
pub fn build_hash() -> String {
    let id = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
    hex::encode(Sha256::digest(id.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub build_hash: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorManifest {
    pub experiment_id: String,
    pub command: String,
    pub error: String,
    /// Planned outputs that exist on disk at the time of failure.
    pub completed: Vec<String>,
    pub missing: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// The output directory of one command invocation.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Create `root`, check the planned outputs are unique and write the
    /// manifest.
    pub fn begin(root: &Path, manifest: RunManifest) -> CliResult<Self> {
        let mut sorted = manifest.outputs.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::Usage(format!("output {} planned twice", w[0])));
        }
        if sorted.iter().any(|o| o == MANIFEST_FILE || o == ERROR_MANIFEST_FILE) {
            return Err(CliError::Usage("outputs may not shadow manifest files".into()));
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let stale = root.join(ERROR_MANIFEST_FILE);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| CliError::io(&stale, e))?;
        }
        let path = root.join(MANIFEST_FILE);
        write_json(&path, &manifest)?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Absolute path of a planned output, creating its parent directory.
    pub fn path(&self, rel: &str) -> CliResult<PathBuf> {
        if !self.manifest.outputs.iter().any(|o| o == rel) {
            return Err(CliError::Usage(format!("output {rel} is not in the manifest")));
        }
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(path)
    }

    pub fn write(&self, rel: &str, contents: &[u8]) -> CliResult<()> {
        let path = self.path(rel)?;
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
    }

    /// Record a failure next to the manifest.
    pub fn fail(&self, err: &CliError) -> CliResult<()> {
        let (completed, missing) =
            self.manifest.outputs.iter().cloned().partition(|o| self.root.join(o).exists());
        let record = ErrorManifest {
            experiment_id: self.manifest.experiment_id.clone(),
            command: self.manifest.command.clone(),
            error: err.one_line(),
            completed,
            missing,
        };
        write_json(&self.root.join(ERROR_MANIFEST_FILE), &record)
    }

    /// Run `body`, recording an error manifest if it fails.
    pub fn guard<T>(&self, body: impl FnOnce(&Self) -> CliResult<T>) -> CliResult<T> {
        body(self).inspect_err(|e| {
            if let Err(write_err) = self.fail(e) {
                log::error!("could not write error manifest: {write_err}");
            }
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

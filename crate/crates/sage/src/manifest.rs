use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::content_hash;
use crate::error::{read, write, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to repeat a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_path: Option<PathBuf>,
    /// Git blob id of the config file bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub deterministic: bool,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, seed: u64, output_dir: &Path) -> Self {
        Self {
            command: command.into(),
            args,
            config_path: None,
            config_hash: None,
            seed,
            output_dir: output_dir.to_path_buf(),
            deterministic: true,
        }
    }

    pub fn with_config(mut self, path: &Path, bytes: &[u8]) -> Self {
        self.config_path = Some(path.to_path_buf());
        self.config_hash = Some(content_hash(bytes));
        self
    }

    /// Writes `{output_dir}/manifest.json`, replacing an earlier one.
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.output_dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        json.push(b'\n');
        write(&path, &json)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        serde_json::from_slice(&read(&path)?).map_err(|e| Error::format(&path, e.to_string()))
    }
}

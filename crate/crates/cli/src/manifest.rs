use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one command run, written last into its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// "ok", or a description of how the run ended.
    pub status: String,
    /// Output files, relative to the directory holding the manifest.
    pub outputs: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: Vec<(String, String)>) -> Self {
        Self {
            command: command.into(),
            version: concat!("c2vae-cli ", env!("CARGO_PKG_VERSION")).into(),
            seed,
            config,
            started_unix: unix_now(),
            finished_unix: 0,
            status: String::new(),
            outputs: Vec::new(),
        }
    }

    /// Stamps the end time and writes `manifest.json` atomically into `dir`.
    /// Refuses to list a file that does not exist.
    pub fn finish(mut self, dir: &Path, status: &str) -> Result<Self> {
        if let Some(missing) = self.outputs.iter().find(|o| !dir.join(o).is_file()) {
            return Err(CliError::Usage(format!("manifest lists missing output {missing}")));
        }
        self.status = status.into();
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, text + "\n")?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad manifest: {e}")))
    }
}

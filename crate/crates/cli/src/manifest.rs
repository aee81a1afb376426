use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use topn_rank::dataset::file_sha256;
use topn_rank::eval::{run_seed, split_seed};
use topn_rank::{Error, Result, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitSeeds {
    pub repeat: usize,
    pub split_seed: u64,
    pub train_seed: u64,
}

pub fn split_seeds(base: u64, repeats: usize) -> Vec<SplitSeeds> {
    (0..repeats)
        .map(|r| SplitSeeds {
            repeat: r,
            split_seed: split_seed(base, r),
            train_seed: run_seed(base, r),
        })
        .collect()
}

/// Everything needed to reproduce one command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    /// Command-specific resolved settings (thresholds, cutoffs, repeats, ...).
    pub settings: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<SplitSeeds>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: None,
            settings: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).expect("settings are plain data");
        self.settings.insert(key.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

/// Leading comment line tying a delimited result file to its manifest.
pub fn tsv_reference() -> String {
    format!("# manifest: {MANIFEST_FILE}\n")
}

/// Wraps a JSON result with a reference to its manifest.
pub fn json_with_reference(key: &str, value: impl Serialize) -> String {
    let doc = serde_json::json!({ "manifest": MANIFEST_FILE, key: value });
    serde_json::to_string_pretty(&doc).expect("results serialize") + "\n"
}

//! Run directories, manifests and input loading shared by the verbs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use cwcl_core::{PairedDataset, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_FORMAT: &str = "cwcl-run-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Files that make up a dataset directory, in hashing order.
const DATASET_FILES: [&str; 4] = [
    "manifest.json",
    "u_features.cwt",
    "v_features.cwt",
    "templates.cwt",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub dataset: Option<DatasetRef>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// Output name to path, relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: serde_json::Value) -> Self {
        Self {
            format: RUN_FORMAT.into(),
            command: command.into(),
            argv: argv.to_vec(),
            config,
            seed: None,
            dataset: None,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            outputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading run manifest {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text)
            .with_context(|| format!("parsing run manifest {}", path.display()))?;
        if m.format != RUN_FORMAT {
            bail!("{} has format {:?}, expected {RUN_FORMAT:?}", path.display(), m.format);
        }
        Ok(m)
    }

    pub fn finish(&mut self) {
        self.finished_unix_ms = now_ms();
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// SHA-256 over the dataset files, each prefixed by its name and length.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in DATASET_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Fails if `dir` exists with content and `force` is off. Call before any
/// output is produced.
pub fn check_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() {
        bail!("output path {} is a file", dir.display());
    }
    if !force && dir.is_dir() {
        let mut entries = fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
        if entries.next().is_some() {
            bail!(
                "output directory {} already exists and is not empty (pass --force to write into it)",
                dir.display()
            );
        }
    }
    Ok(())
}

pub fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid {what} {}", path.display()))
}

pub fn load_spec(path: Option<&Path>) -> Result<SyntheticSpec> {
    let spec = match path {
        Some(p) => read_json(p, "dataset spec")?,
        None => SyntheticSpec::default(),
    };
    spec.validate().context("invalid dataset spec")?;
    Ok(spec)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let cfg: TrainConfig = read_json(path, "training config")?;
    cfg.validate()
        .with_context(|| format!("invalid training config {}", path.display()))?;
    Ok(cfg)
}

pub fn load_dataset(dir: &Path) -> Result<(PairedDataset, DatasetRef)> {
    let ds = PairedDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let sha256 = dataset_hash(dir)?;
    let path = fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf());
    Ok((ds, DatasetRef { path, sha256 }))
}

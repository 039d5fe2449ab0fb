//! Run manifests: what a command read and wrote, and how to run it again.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::{fsio, report};

/// Inputs, outputs and settings of one command, gathered while it runs.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    /// SHA-256 of the resolved configuration.
    pub config_hash: Option<String>,
    /// Where the manifest goes; `None` for commands that only print.
    pub manifest: Option<PathBuf>,
}

impl RunRecord {
    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// SHA-256 per input path, as given on the command line.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// `<output>.manifest.toml` next to the command's main output.
pub fn default_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.toml");
    primary.with_file_name(name)
}

fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), fsio::sha256_file(p)?)))
        .collect()
}

pub fn build(argv: &[String], record: &RunRecord) -> Result<RunManifest> {
    let cwd = std::env::current_dir().map_err(|e| CliError::data(format!("working directory: {e}")))?;
    Ok(RunManifest {
        tool: "tmlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        argv: argv.to_vec(),
        cwd: cwd.display().to_string(),
        seed: record.seed,
        config_hash: record.config_hash.clone(),
        inputs: hashes(&record.inputs)?,
        outputs: hashes(&record.outputs)?,
    })
}

pub fn save(path: &Path, m: &RunManifest) -> Result<()> {
    report::save_toml(path, m)
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let text = fsio::read_string(path)?;
    toml::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Paths whose current content differs from the recorded hash.
pub fn changed(recorded: &BTreeMap<String, String>) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (p, h) in recorded {
        let path = Path::new(p);
        let now = if path.exists() { Some(fsio::sha256_file(path)?) } else { None };
        if now.as_deref() != Some(h.as_str()) {
            out.push(p.clone());
        }
    }
    Ok(out)
}

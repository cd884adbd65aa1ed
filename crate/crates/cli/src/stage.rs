//! Stage manifests and the content-hash chain between stages.
//!
//! Every stage directory holds a `stage.json` listing the SHA-256 of its
//! inputs, of the configuration sections it depends on, and of every output
//! it wrote. A downstream stage re-hashes the upstream outputs before using
//! them and records the upstream `stage.json` hash as one of its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use eusml_core::enhance::Method;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = concat!("eusml ", env!("CARGO_PKG_VERSION"));
pub const STAGE_FILE: &str = "stage.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Clean,
    Enhance,
    Split,
    Train,
    Eval,
    GradCam,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Clean => "clean",
            Stage::Enhance => "enhance",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::GradCam => "gradcam",
        }
    }

    /// Output directory of this stage. Everything after cleaning is kept per
    /// enhancement method.
    pub fn dir(self, out: &Path, method: Method) -> PathBuf {
        match self {
            Stage::Clean => out.join("clean"),
            s => out.join(method.as_str()).join(s.name()),
        }
    }

    /// Command that produces this stage, for error messages.
    pub fn command(self, method: Method) -> String {
        match self {
            Stage::Clean => "eusml clean".into(),
            s => format!("eusml {} --method {method}", s.name()),
        }
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

/// Hash over the sorted relative paths and contents of every file under
/// `dir`.
pub fn tree_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(CliError::runtime)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        let rel = rel.to_string_lossy().replace('\\', "/");
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(sha256_file(entry.path())?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of whatever `path` is: a file's bytes or a directory tree.
pub fn digest(path: &Path) -> Result<String> {
    if path.is_dir() {
        tree_digest(path)
    } else {
        sha256_file(path)
    }
}

/// The configuration sections a stage depends on, cumulatively over its
/// upstream stages. Paths are left out: the data they point to is hashed as
/// input instead.
pub fn config_section(cfg: &PipelineConfig, stage: Stage, method: Method) -> Value {
    let mut v = json!({ "sample_fps": cfg.sample_fps, "cleaning": cfg.cleaning });
    if stage == Stage::Clean {
        return v;
    }
    let enhance = eusml_core::enhance::EnhanceConfig { method, ..cfg.enhance };
    v["enhance"] = json!(enhance);
    if stage == Stage::Enhance {
        return v;
    }
    v["label_offset"] = json!(cfg.label_offset);
    v["split"] = json!(cfg.split);
    v["input_size"] = json!(cfg.model.input_size);
    if stage == Stage::Split {
        return v;
    }
    v["model"] = json!(cfg.model);
    v["train"] = json!(cfg.train);
    if stage == Stage::GradCam {
        v["gradcam"] = json!(cfg.gradcam);
    }
    v
}

pub fn config_hash(cfg: &PipelineConfig, stage: Stage, method: Method) -> String {
    let v = config_section(cfg, stage, method);
    sha256_bytes(&serde_json::to_vec(&v).expect("config serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub tool_version: String,
    pub config_hash: String,
    /// Input name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the stage directory to SHA-256 (directories
    /// use [`tree_digest`]).
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn new(cfg: &PipelineConfig, stage: Stage, method: Method) -> Self {
        Self {
            stage: stage.name().into(),
            method: (stage != Stage::Clean).then(|| method.as_str().to_string()),
            tool_version: TOOL_VERSION.into(),
            config_hash: config_hash(cfg, stage, method),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Hashes the named outputs under `dir` and writes `stage.json` last.
    pub fn finish(mut self, dir: &Path, outputs: &[&str]) -> Result<StageManifest> {
        for name in outputs {
            self.outputs.insert(name.to_string(), digest(&dir.join(name))?);
        }
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        write_file(&dir.join(STAGE_FILE), text.as_bytes())?;
        Ok(self)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Removes and recreates a stage directory so no stale files survive.
pub fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

/// Loads and verifies an upstream stage: its manifest must exist, its
/// outputs must still hash to the recorded values, and its configuration
/// must match the current one unless `force` is set (then a warning is
/// printed). Returns the manifest and the hash of its `stage.json`.
pub fn require_upstream(
    cfg: &PipelineConfig,
    stage: Stage,
    method: Method,
    force: bool,
) -> Result<(StageManifest, String)> {
    let dir = stage.dir(&cfg.paths.output_dir, method);
    let path = dir.join(STAGE_FILE);
    let cmd = stage.command(method);
    let text = fs::read_to_string(&path)
        .map_err(|_| CliError::Prerequisite(format!("{} not found; run `{cmd}` first", path.display())))?;
    let manifest: StageManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Prerequisite(format!("{} is unreadable ({e}); rerun `{cmd}`", path.display())))?;
    for (name, recorded) in &manifest.outputs {
        let p = dir.join(name);
        let actual = if p.exists() { digest(&p)? } else { String::new() };
        if &actual != recorded {
            return Err(CliError::Prerequisite(format!(
                "{} changed since `{cmd}` wrote it; rerun `{cmd}`",
                p.display()
            )));
        }
    }
    if manifest.config_hash != config_hash(cfg, stage, method) {
        let msg = format!("{} was produced with a different configuration; rerun `{cmd}`", dir.display());
        if !force {
            return Err(CliError::Prerequisite(format!("{msg} or pass --force")));
        }
        eprintln!("warning: {msg} (continuing because of --force)");
    }
    Ok((manifest, sha256_bytes(text.as_bytes())))
}

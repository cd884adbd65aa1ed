//! `pipeline.json`: where the data lives and how every stage is configured.
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use eusml_core::enhance::EnhanceConfig;
use eusml_core::nn::{ConvLayer, TrainConfig};
use eusml_core::pipeline::CleaningThresholds;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// One `<procedure>/{meta.json, frames/%06d.png}` directory per procedure.
    pub frames_root: PathBuf,
    /// `<procedure>.csv` label files.
    pub labels_dir: PathBuf,
    /// Reference frame for the histogram noise detectors.
    pub reference: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub test_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, test_frac: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub coord_channels: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_size: 32, coord_channels: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCamConfig {
    pub layer: String,
    /// Number of test frames to explain.
    pub images: usize,
    pub alpha: f64,
}

impl Default for GradCamConfig {
    fn default() -> Self {
        Self { layer: "conv3".into(), images: 8, alpha: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: Option<PathBuf>,
    pub token: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, data_dir: None, token: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Frames per second kept from each recording.
    #[serde(default = "one")]
    pub sample_fps: f64,
    /// Seconds added to every label boundary.
    #[serde(default)]
    pub label_offset: f64,
    #[serde(default)]
    pub cleaning: CleaningThresholds,
    #[serde(default)]
    pub enhance: EnhanceConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub gradcam: GradCamConfig,
    #[serde(default)]
    pub serve: ServeConfig,
}

fn one() -> f64 {
    1.0
}

impl PipelineConfig {
    /// Reads and validates `path`, resolving relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.paths.frames_root,
            &mut self.paths.labels_dir,
            &mut self.paths.reference,
            &mut self.paths.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(d) = self.serve.data_dir.as_mut().filter(|d| d.is_relative()) {
            *d = base.join(&*d);
        }
    }

    /// Checks parameter ranges and that the input paths exist.
    pub fn validate(&self) -> Result<()> {
        self.cleaning.validate().map_err(CliError::validation)?;
        self.enhance.validate().map_err(CliError::validation)?;
        self.train.validate().map_err(CliError::validation)?;
        let v = |m: String| CliError::Validation(m);
        if !(self.sample_fps > 0.0 && self.sample_fps.is_finite()) {
            return Err(v(format!("sample_fps must be positive, got {}", self.sample_fps)));
        }
        if !self.label_offset.is_finite() {
            return Err(v("label_offset must be finite".into()));
        }
        if !(self.split.test_frac > 0.0 && self.split.test_frac < 1.0) {
            return Err(v(format!("split.test_frac must be in (0, 1), got {}", self.split.test_frac)));
        }
        if self.model.input_size < 8 {
            return Err(v(format!("model.input_size must be at least 8, got {}", self.model.input_size)));
        }
        self.layer()?;
        if !(0.0..=1.0).contains(&self.gradcam.alpha) {
            return Err(v(format!("gradcam.alpha must be in [0, 1], got {}", self.gradcam.alpha)));
        }
        for (name, p) in [
            ("paths.frames_root", &self.paths.frames_root),
            ("paths.labels_dir", &self.paths.labels_dir),
            ("paths.reference", &self.paths.reference),
        ] {
            if !p.exists() {
                return Err(v(format!("{name} {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn layer(&self) -> Result<ConvLayer> {
        self.gradcam.layer.parse().map_err(CliError::validation)
    }
}

//! Run configuration: one TOML file drives every subcommand.
//!
//! Parsing is fail-closed: unknown keys anywhere in the file are errors.
//! The schema is documented in the repository README.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rotcalib::calib::CalibConfig;
use rotcalib::model::ModelConfig;
use rotcalib::synth::SyntheticSpec;
use rotcalib::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub calib: CalibConfig,
    pub rotation_init: RotationInit,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationInit {
    pub kind: RotationInitKind,
    /// Master seed for the Hadamard initialization.
    #[serde(default)]
    pub seed: u64,
    /// Rotation checkpoint for `kind = "file"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Overrides the online QK-Hadamard flag (defaults: identity off,
    /// hadamard on, file as stored).
    #[serde(default)]
    pub qk_hadamard: Option<bool>,
    /// Overrides the online MLP-Hadamard flag, same defaults.
    #[serde(default)]
    pub mlp_hadamard: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationInitKind {
    Identity,
    Hadamard,
    File,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Weight/activation/KV bit triplets, e.g. `[[4, 4, 16], [4, 4, 4]]`.
    pub triplets: Vec<[u32; 3]>,
    #[serde(default = "default_act_clip")]
    pub act_clip: f64,
    #[serde(default = "default_kv_clip")]
    pub kv_clip: f64,
    /// KV quantization group size; defaults to the head dimension.
    #[serde(default)]
    pub kv_group: Option<usize>,
    pub n_sequences: usize,
    pub seq_len: usize,
    /// Seed for the held-out evaluation sequences.
    pub seed: u64,
    /// Number of thresholds in participation-ratio CDFs.
    #[serde(default = "default_pr_grid")]
    pub pr_grid: usize,
}

fn default_act_clip() -> f64 {
    0.9
}

fn default_kv_clip() -> f64 {
    1.0
}

fn default_pr_grid() -> usize {
    101
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Token file for `source = "file"`; read as raw bytes and packed into
    /// `calib.seq_len`-long sequences with tail truncation.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generator parameters for `source = "synthetic"`; also consulted by
    /// `gen-data`.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    File,
    Synthetic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.calib.validate()?;
        if self.calib.act_spec.bits < 2 || self.calib.act_spec.bits > 16 {
            return Err(Error::InvalidInput(
                "calib.act_spec.bits must be in 2..=16".into(),
            ));
        }
        for t in &self.eval.triplets {
            for &b in t {
                if !(2..=16).contains(&b) {
                    return Err(Error::InvalidInput(format!(
                        "eval triplet bits must be in 2..=16, got {b}"
                    )));
                }
            }
        }
        if self.eval.triplets.is_empty() {
            return Err(Error::InvalidInput(
                "eval.triplets must not be empty".into(),
            ));
        }
        for (name, clip) in [
            ("act_clip", self.eval.act_clip),
            ("kv_clip", self.eval.kv_clip),
        ] {
            if clip <= 0.0 || clip > 1.0 || clip.is_nan() {
                return Err(Error::InvalidInput(format!(
                    "eval.{name} must be in (0, 1]"
                )));
            }
        }
        if self.eval.n_sequences == 0 || self.eval.seq_len < 2 {
            return Err(Error::InvalidInput(
                "eval.n_sequences must be >= 1 and eval.seq_len >= 2".into(),
            ));
        }
        if self.eval.pr_grid < 2 {
            return Err(Error::InvalidInput("eval.pr_grid must be >= 2".into()));
        }
        if let Some(g) = self.eval.kv_group {
            if g == 0 || !self.model.d_head().is_multiple_of(g) {
                return Err(Error::InvalidInput(format!(
                    "eval.kv_group {g} must divide d_head {}",
                    self.model.d_head()
                )));
            }
        }
        match self.data.source {
            DataSource::File => {
                let path = self.data.path.as_ref().ok_or_else(|| {
                    Error::InvalidInput("data.source = \"file\" needs data.path".into())
                })?;
                if !path.exists() {
                    return Err(Error::InvalidInput(format!(
                        "data file {} does not exist",
                        path.display()
                    )));
                }
            }
            DataSource::Synthetic => {
                let spec = self.data.synthetic.as_ref().ok_or_else(|| {
                    Error::InvalidInput(
                        "data.source = \"synthetic\" needs a [data.synthetic] table".into(),
                    )
                })?;
                spec.validate(self.model.d_model)?;
                if self.model.vocab > 256 {
                    return Err(Error::InvalidInput(
                        "byte-level token files need vocab <= 256".into(),
                    ));
                }
            }
        }
        match self.rotation_init.kind {
            RotationInitKind::File => {
                let path = self.rotation_init.path.as_ref().ok_or_else(|| {
                    Error::InvalidInput("rotation_init.kind = \"file\" needs a path".into())
                })?;
                if !path.exists() {
                    return Err(Error::InvalidInput(format!(
                        "rotation checkpoint {} does not exist",
                        path.display()
                    )));
                }
            }
            RotationInitKind::Identity | RotationInitKind::Hadamard => {}
        }
        Ok(())
    }
}

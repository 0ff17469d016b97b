//! Pipeline configuration, artifact stamps and file plumbing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use hdvnet::infer::InferenceMode;
use hdvnet::model::HdvConfig;
use hdvnet::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DATA_DIR_ENV: &str = "HDVNET_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Markdown,
    Csv,
    Json,
}

/// Which scenes `gen-scene` writes and which of them train and test use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSet {
    /// Scene spec JSON; the built-in mine generator when absent.
    pub spec: Option<PathBuf>,
    pub rows: u32,
    pub cols: u32,
    pub min_points: usize,
    /// File names relative to the data directory.
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Default for SceneSet {
    fn default() -> Self {
        SceneSet {
            spec: None,
            rows: 48,
            cols: 256,
            min_points: 1000,
            train: (0..6).map(|i| format!("scene_{i:03}.ply")).collect(),
            test: (6..8).map(|i| format!("scene_{i:03}.ply")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Backbone checkpoint: written by `train`, read by `finetune`.
    pub checkpoint: Option<PathBuf>,
    /// Fine-tuned checkpoint: written by `finetune`, read by `infer`.
    pub final_checkpoint: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub format: TableFormat,
    pub inference: InferenceMode,
    pub model: HdvConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub scenes: SceneSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_dir: None,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            final_checkpoint: None,
            thresholds: None,
            seed: 0,
            threads: None,
            format: TableFormat::Markdown,
            inference: InferenceMode::Final,
            model: HdvConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            scenes: SceneSet::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<PipelineConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.finetune.validate()?;
        Ok(cfg)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("backbone.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.final_checkpoint.clone().unwrap_or_else(|| self.out_dir.join("final.ckpt"))
    }

    pub fn thresholds(&self) -> PathBuf {
        self.thresholds.clone().unwrap_or_else(|| self.out_dir.join("thresholds.json"))
    }

    /// SHA-256 of the canonical JSON of everything that can change an
    /// artifact's content. File locations, thread count and table format
    /// are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = None;
        c.out_dir = PathBuf::new();
        c.checkpoint = None;
        c.final_checkpoint = None;
        c.thresholds = None;
        c.threads = None;
        c.format = TableFormat::Markdown;
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Stamp {
        Stamp {
            tool: "hdvnet".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }
}

pub fn stamp_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".stamp.json");
    artifact.with_file_name(name)
}

fn partial_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    artifact.with_file_name(name)
}

/// Writes an artifact through `write` into a `.partial` file, renames it
/// into place, then writes the stamp sidecar. A failed write leaves nothing
/// behind.
pub fn write_artifact(
    path: &Path,
    stamp: Option<&Stamp>,
    write: impl FnOnce(&Path) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = partial_path(path);
    if let Err(e) = write(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e.context(format!("writing {}", path.display())));
    }
    fs::rename(&tmp, path).with_context(|| format!("moving {} into place", path.display()))?;
    if let Some(s) = stamp {
        let sp = stamp_path(path);
        fs::write(&sp, serde_json::to_string_pretty(s)?).with_context(|| format!("writing {}", sp.display()))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, stamp: Option<&Stamp>, text: &str) -> anyhow::Result<()> {
    write_artifact(path, stamp, |tmp| Ok(fs::write(tmp, text)?))
}

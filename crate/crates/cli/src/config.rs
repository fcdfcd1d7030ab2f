//! Run configuration file.
//!
//! ```json
//! {
//!   "network": { "arch": "cst-yolo", "num_classes": 3, "input_size": 256, "width": 0.25 },
//!   "train": { "lr0": 0.01, "weight_decay": 0.0005, "batch": 8, "epochs": 30, "seed": 7 },
//!   "data": { "root": "../data/synth7" },
//!   "output": { "checkpoint": "../runs/toy.ckpt", "metrics_csv": "../runs/toy.csv" }
//! }
//! ```
//!
//! Relative paths are resolved against the directory holding the config.

use std::path::{Path, PathBuf};

use cst_yolo::data::{blood_classes, Split};
use cst_yolo::detector::{NetworkConfig, TrainConfig};
use cst_yolo::{Error, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Defaults to `root/manifest.txt`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Defaults to WBC, RBC, Platelets.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    /// Split scored during training. Defaults to `val`, or `test` when the
    /// manifest has no validation images.
    #[serde(default)]
    pub val_split: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub metrics_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.data.root = abs(&cfg.data.root);
        cfg.data.manifest = cfg.data.manifest.as_deref().map(abs);
        cfg.output.checkpoint = abs(&cfg.output.checkpoint);
        cfg.output.metrics_csv = cfg.output.metrics_csv.as_deref().map(abs);
        if cfg.network.num_classes != cfg.classes().len() {
            return Err(Error::Config(format!(
                "network.num_classes is {} but {} class names are configured",
                cfg.network.num_classes,
                cfg.classes().len()
            )));
        }
        Ok(cfg)
    }

    pub fn classes(&self) -> Vec<String> {
        self.data.classes.clone().unwrap_or_else(blood_classes)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data.manifest.clone().unwrap_or_else(|| self.data.root.join("manifest.txt"))
    }

    pub fn val_split(&self) -> Result<Option<Split>> {
        self.data.val_split.as_deref().map(str::parse).transpose()
    }
}

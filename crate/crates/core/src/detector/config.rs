use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{SwinConfig, WElanVariant};

/// YOLOv7 COCO anchors for a 640 input, `(w, h)` pairs per scale.
pub const COCO_ANCHORS: [[f64; 6]; 3] = [
    [12.0, 16.0, 19.0, 36.0, 40.0, 28.0],
    [36.0, 75.0, 76.0, 55.0, 72.0, 146.0],
    [142.0, 110.0, 192.0, 243.0, 459.0, 401.0],
];

pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "w/o-cst")]
    WithoutCst,
    #[serde(rename = "w/o-welan")]
    WithoutWelan,
    #[serde(rename = "w/o-mcs")]
    WithoutMcs,
    #[serde(rename = "w/-maxpool")]
    WithMaxPool,
}

/// Named architecture presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    CstYolo,
    Yolov7Baseline,
    Ablation(Ablation),
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::CstYolo => write!(f, "cst-yolo"),
            Arch::Yolov7Baseline => write!(f, "yolov7-baseline"),
            Arch::Ablation(a) => {
                let s = match a {
                    Ablation::WithoutCst => "w/o-cst",
                    Ablation::WithoutWelan => "w/o-welan",
                    Ablation::WithoutMcs => "w/o-mcs",
                    Ablation::WithMaxPool => "w/-maxpool",
                };
                write!(f, "ablation:{s}")
            }
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cst-yolo" => Arch::CstYolo,
            "yolov7-baseline" => Arch::Yolov7Baseline,
            "ablation:w/o-cst" => Arch::Ablation(Ablation::WithoutCst),
            "ablation:w/o-welan" => Arch::Ablation(Ablation::WithoutWelan),
            "ablation:w/o-mcs" => Arch::Ablation(Ablation::WithoutMcs),
            "ablation:w/-maxpool" => Arch::Ablation(Ablation::WithMaxPool),
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        })
    }
}

impl Serialize for Arch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Arch {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Downsample {
    /// YOLOv7 MP block with a max-pool branch.
    MaxPool,
    /// Stride-2 CBS in place of the max-pool (backbone).
    CbsConcat,
    /// Widened concatenating downsampler (neck).
    CatConv,
}

/// Where the new modules sit in the YOLOv7 graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Replace the last backbone ELAN (P5) by a CST block.
    pub cst_p5: bool,
    /// Weighted variant for backbone ELANs, `None` for plain ELAN.
    pub backbone_welan: Option<WElanVariant>,
    /// Weighted variant for neck ELAN-H blocks.
    pub neck_welan: Option<WElanVariant>,
    /// MCS on the P3 lateral route into the neck.
    pub mcs_p3: bool,
    pub backbone_down: Downsample,
    pub neck_down: Downsample,
}

impl Placement {
    pub fn for_arch(arch: Arch) -> Self {
        let full = Placement {
            cst_p5: true,
            backbone_welan: Some(WElanVariant::V1),
            neck_welan: Some(WElanVariant::V2),
            mcs_p3: true,
            backbone_down: Downsample::CbsConcat,
            neck_down: Downsample::CatConv,
        };
        match arch {
            Arch::CstYolo => full,
            Arch::Yolov7Baseline => Placement {
                cst_p5: false,
                backbone_welan: None,
                neck_welan: None,
                mcs_p3: false,
                backbone_down: Downsample::MaxPool,
                neck_down: Downsample::MaxPool,
            },
            Arch::Ablation(Ablation::WithoutCst) => Placement { cst_p5: false, ..full },
            Arch::Ablation(Ablation::WithoutWelan) => Placement { backbone_welan: None, neck_welan: None, ..full },
            Arch::Ablation(Ablation::WithoutMcs) => Placement { mcs_p3: false, ..full },
            Arch::Ablation(Ablation::WithMaxPool) => Placement {
                backbone_down: Downsample::MaxPool,
                neck_down: Downsample::MaxPool,
                ..full
            },
        }
    }
}

fn default_mcs_channels() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub arch: Arch,
    pub num_classes: usize,
    /// Square network input in pixels, a multiple of 32.
    pub input_size: usize,
    /// Channel multiplier; widths are rounded up to multiples of 8.
    pub width: f64,
    /// `(w, h)` anchor pairs in input pixels, three per scale. Defaults to
    /// the COCO anchors rescaled to `input_size`.
    #[serde(default)]
    pub anchors: Option<[[f64; 6]; 3]>,
    #[serde(default)]
    pub placement: Option<Placement>,
    #[serde(default)]
    pub swin: SwinConfig,
    #[serde(default = "default_mcs_channels")]
    pub mcs_channels: usize,
    /// RepConv heads stored in fused form.
    #[serde(default)]
    pub fused: bool,
}

impl NetworkConfig {
    pub fn new(arch: Arch, num_classes: usize, input_size: usize, width: f64) -> Self {
        NetworkConfig {
            arch,
            num_classes,
            input_size,
            width,
            anchors: None,
            placement: None,
            swin: SwinConfig::default(),
            mcs_channels: default_mcs_channels(),
            fused: false,
        }
    }

    pub fn placement(&self) -> Placement {
        self.placement.clone().unwrap_or_else(|| Placement::for_arch(self.arch))
    }

    pub fn anchors(&self) -> [[f64; 6]; 3] {
        self.anchors.unwrap_or_else(|| {
            let s = self.input_size as f64 / 640.0;
            COCO_ANCHORS.map(|row| row.map(|v| v * s))
        })
    }

    /// Anchor `(w, h)` pairs of one scale.
    pub fn scale_anchors(&self, scale: usize) -> [[f64; 2]; 3] {
        let a = self.anchors()[scale];
        [[a[0], a[1]], [a[2], a[3]], [a[4], a[5]]]
    }

    /// `ceil(c · width / 8) · 8`, at least 8.
    pub fn ch(&self, c: usize) -> usize {
        let v = (c as f64 * self.width / 8.0).ceil() as usize * 8;
        v.max(8)
    }

    pub fn outputs_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!("input_size {} must be a positive multiple of 32", self.input_size)));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!("width multiplier {} must be positive", self.width)));
        }
        if self.anchors().iter().flatten().any(|&a| !(a > 0.0)) {
            return Err(Error::Config("anchors must be positive".into()));
        }
        if self.swin.window == 0 || self.swin.heads == 0 || self.swin.mlp_ratio == 0 {
            return Err(Error::Config("swin window, heads and mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }
}

fn default_lr_min_frac() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.937
}
fn default_eval_interval() -> usize {
    1
}

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `lr_min = lr_min_frac · lr0`.
    #[serde(default = "default_lr_min_frac")]
    pub lr_min_frac: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Evaluate validation mAP every this many epochs (and after the last).
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            weight_decay: 0.0005,
            batch: 20,
            epochs: 150,
            seed: 0,
            lr_min_frac: default_lr_min_frac(),
            momentum: default_momentum(),
            eval_interval: default_eval_interval(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_min(&self) -> f64 {
        self.lr0 * self.lr_min_frac
    }

    /// `lr_min + (lr0 − lr_min)·(1 + cos(π·e/E))/2`.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let lmin = self.lr_min();
        let e = self.epochs.max(1) as f64;
        lmin + (self.lr0 - lmin) * (1.0 + (std::f64::consts::PI * epoch / e).cos()) / 2.0
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if dataset_len == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        if !(self.lr0 > 0.0) || self.weight_decay < 0.0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("lr0, batch and epochs must be positive".into()));
        }
        if self.batch > dataset_len {
            return Err(Error::Config(format!("batch {} exceeds dataset size {dataset_len}", self.batch)));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        Ok(())
    }
}

fn d_box() -> f64 {
    0.05
}
fn d_obj() -> f64 {
    0.7
}
fn d_cls() -> f64 {
    0.3
}
fn d_anchor_t() -> f64 {
    4.0
}
fn d_balance() -> [f64; 3] {
    [4.0, 1.0, 0.4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default = "d_box")]
    pub box_gain: f64,
    #[serde(default = "d_obj")]
    pub obj_gain: f64,
    #[serde(default = "d_cls")]
    pub cls_gain: f64,
    /// Maximum anchor/target side ratio for a match.
    #[serde(default = "d_anchor_t")]
    pub anchor_t: f64,
    /// Objectness weight per scale (P3, P4, P5).
    #[serde(default = "d_balance")]
    pub balance: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { box_gain: d_box(), obj_gain: d_obj(), cls_gain: d_cls(), anchor_t: d_anchor_t(), balance: d_balance() }
    }
}

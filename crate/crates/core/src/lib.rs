//! CPU implementation of a YOLOv7-family small-object detector that fuses
//! convolutional features with shifted-window self-attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense 4-D tensors and a reverse-mode autodiff tape.
//! * [`nn`]: parameter storage and the forward context shared by all blocks.
//! * [`blocks`]: the stock YOLOv7 blocks (CBS, ELAN, SPPCSPC, MPConv, RepConv).
//! * [`fusion`]: the attention/fusion blocks (CST, W-ELAN, MCS, CatConv).
//! * [`boxes`]: corner boxes, IoU and the detection record.
//! * [`detector`]: network assembly, IDetect head, decoding, NMS, loss, training.
//! * [`metrics`]: IoU, greedy matching, average precision and mAP@0.5 reports.
//! * [`data`]: VOC XML annotations, split manifests, letterboxing, synthetic cells.
//! * [`checkpoint`]: binary parameter checkpoints.

pub mod blocks;
pub mod boxes;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Shape, Tape, Tensor, Var};

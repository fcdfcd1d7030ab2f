//! The YOLOv7-style detector: configuration, graph, head, decoding, loss
//! and training loop.

pub mod config;
pub mod decode;
pub mod graph;
pub mod head;
pub mod loss;
pub mod train;

pub use config::{Ablation, Arch, Downsample, LossConfig, NetworkConfig, Placement, TrainConfig, COCO_ANCHORS, STRIDES};
pub use decode::{decode, decode_box, nms};
pub use graph::{default_graph, Block, BlockSpec, Network, Node, NodeSpec};
pub use head::{IDetect, NUM_ANCHORS};
pub use loss::{build_targets, ciou, compute_loss, Assignment, LossOutput, Target};
pub use train::{
    collate, evaluate_samples, log_csv, predict, train, train_step, EpochLog, InferenceConfig, LossParts, Sgd, LOG_HEADER,
};

use crate::error::Result;
use crate::nn::{count_trainable, ParamStore};
use crate::tensor::Float;

impl Network {
    /// Fresh parameters for this network with the head bias prior applied.
    pub fn init_params<T: Float>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::from_specs(&self.specs(), seed)?;
        self.detect().init_biases(&mut store)?;
        Ok(store)
    }

    pub fn num_trainable(&self) -> usize {
        count_trainable(&self.specs())
    }

    /// Folds every RepConv into a single conv, rewriting `store`.
    pub fn fuse<T: Float>(&self, store: &mut ParamStore<T>) -> Result<Network> {
        let mut out = self.clone();
        for n in &mut out.nodes {
            if let Block::RepConv(r) = &n.block {
                let fused = r.fuse_into(store)?;
                n.block = Block::RepConv(fused);
            }
        }
        out.cfg.fused = true;
        Ok(out)
    }
}

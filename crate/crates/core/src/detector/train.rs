//! SGD training loop and batched inference.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::Detection;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult, GtBox, IOU_THRESH};
use crate::nn::{apply_bn_updates, Ctx, Mode, ParamStore, Role, BN_MOMENTUM};
use crate::tensor::{Shape, Tensor};

use super::config::TrainConfig;
use super::decode::{decode, nms};
use super::graph::Network;
use super::loss::{compute_loss, Target};

/// SGD with Nesterov momentum; weight decay on convolution kernels only.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)], lr: f64) -> Result<()> {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if !p.role.trainable() {
                continue;
            }
            let decay = if p.role == Role::ConvWeight { wd } else { 0.0 };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + decay * *w;
                *vi = mu * *vi + d;
                *w -= lr * (d + mu * *vi);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.box_loss + self.obj_loss + self.cls_loss
    }
}

/// Stacks samples into one `(B, 3, S, S)` batch with normalised targets.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<Target>)> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?.image.shape();
    let mut data = Vec::with_capacity(samples.len() * first.numel());
    let mut targets = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != first {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", first, s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
        let (w, h) = (first.w() as f64, first.h() as f64);
        for g in &s.boxes {
            let (cx, cy) = g.bbox.center();
            targets.push(Target {
                image: i,
                class: g.class,
                cx: cx / w,
                cy: cy / h,
                w: g.bbox.width() / w,
                h: g.bbox.height() / h,
            });
        }
    }
    let shape = Shape::new(samples.len(), first.c(), first.h(), first.w());
    Ok((Tensor::new(shape, data)?, targets))
}

/// One forward/backward pass and parameter update. Returns the loss terms
/// before the update.
pub fn train_step(
    net: &Network,
    store: &mut ParamStore<f32>,
    opt: &mut Sgd,
    batch: &[&Sample],
    lr: f64,
    tc: &TrainConfig,
) -> Result<LossParts> {
    let (x, targets) = collate(batch)?;
    let (parts, grads, bn) = {
        let mut cx = Ctx::new(store, Mode::Train);
        let xv = cx.input(x, false);
        let raw = net.forward(&mut cx, xv)?;
        let lo = compute_loss(&mut cx.tape, raw, &targets, &net.cfg, &tc.loss, None)?;
        let parts = LossParts { box_loss: lo.box_loss, obj_loss: lo.obj_loss, cls_loss: lo.cls_loss };
        if !parts.total().is_finite() {
            return Err(Error::Contract(format!("non-finite loss {parts:?}")));
        }
        let mut g = cx.tape.backward(lo.total)?;
        let grads: Vec<(String, Tensor<f32>)> =
            cx.bound_params().into_iter().map(|(name, v)| (name, g.take(v))).collect();
        (parts, grads, cx.take_bn_updates())
    };
    apply_bn_updates(store, &bn, BN_MOMENTUM)?;
    opt.step(store, &grads, lr)?;
    Ok(parts)
}

/// Post-processing settings for inference and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    /// Candidates kept (by confidence) before suppression.
    pub max_candidates: usize,
    pub max_det: usize,
    pub batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { conf_thresh: 0.001, iou_thresh: 0.65, max_candidates: 3000, max_det: 300, batch: 8 }
    }
}

/// Detections per sample, in network-input pixels.
pub fn predict(net: &Network, store: &ParamStore<f32>, samples: &[Sample], ic: &InferenceConfig) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ic.batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = collate(&refs)?;
        let mut cx = Ctx::new(store, Mode::Eval);
        let xv = cx.input(x, false);
        let raw = net.forward(&mut cx, xv)?;
        let maps = raw.map(|v| cx.tape.value(v).clone());
        for mut dets in decode(&maps, &net.cfg, ic.conf_thresh) {
            if dets.len() > ic.max_candidates {
                dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
                dets.truncate(ic.max_candidates);
            }
            let mut kept = nms(&dets, ic.iou_thresh, ic.conf_thresh);
            kept.truncate(ic.max_det);
            out.push(kept);
        }
    }
    Ok(out)
}

pub fn evaluate_samples(
    net: &Network,
    store: &ParamStore<f32>,
    samples: &[Sample],
    classes: &[String],
    ic: &InferenceConfig,
) -> Result<EvalResult> {
    let preds = predict(net, store, samples, ic)?;
    let gts: Vec<Vec<GtBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    evaluate(&preds, &gts, classes, IOU_THRESH)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub val_map50: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,box_loss,obj_loss,cls_loss,val_mAP50";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let map = self.val_map50.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:.8},{:.6},{:.6},{:.6},{map}",
            self.epoch, self.lr, self.box_loss, self.obj_loss, self.cls_loss
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

/// Trains in place. Batches are reshuffled every epoch from `tc.seed`; the
/// learning rate follows the cosine schedule per epoch. `on_epoch` sees
/// each log row as it is produced.
pub fn train(
    net: &Network,
    store: &mut ParamStore<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    classes: &[String],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    tc.validate(train_set.len())?;
    let ic = InferenceConfig::default();
    let mut opt = Sgd::new(tc.momentum, tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut log = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch as f64);
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut steps = 0;
        for idx in order.chunks(tc.batch) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let p = train_step(net, store, &mut opt, &batch, lr, tc)?;
            sum.box_loss += p.box_loss;
            sum.obj_loss += p.obj_loss;
            sum.cls_loss += p.cls_loss;
            steps += 1;
        }
        let last = epoch + 1 == tc.epochs;
        let val_map50 = if !val_set.is_empty() && ((epoch + 1) % tc.eval_interval == 0 || last) {
            Some(evaluate_samples(net, store, val_set, classes, &ic)?.map50)
        } else {
            None
        };
        let n = steps as f64;
        let row = EpochLog {
            epoch,
            lr,
            box_loss: sum.box_loss / n,
            obj_loss: sum.obj_loss / n,
            cls_loss: sum.cls_loss / n,
            val_map50,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(log)
}

use crate::boxes::{iou_unchecked, BBox, Detection};
use crate::tensor::{Float, Tensor};

use super::config::{NetworkConfig, STRIDES};
use super::head::NUM_ANCHORS;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Raw attribute `attr` of anchor `a` at cell `(y, x)` of image `b`.
#[inline]
pub fn raw_at<T: Float>(t: &Tensor<T>, no: usize, b: usize, a: usize, attr: usize, y: usize, x: usize) -> f64 {
    t.at([b, a * no + attr, y, x]).as_f64()
}

/// Box of one anchor/cell: centre `(2σ(t)−0.5+g)·s`, size `(2σ(t))²·anchor`.
pub fn decode_box(t: [f64; 4], gx: usize, gy: usize, stride: f64, anchor: [f64; 2]) -> BBox {
    let cx = (2.0 * sigmoid(t[0]) - 0.5 + gx as f64) * stride;
    let cy = (2.0 * sigmoid(t[1]) - 0.5 + gy as f64) * stride;
    let w = (2.0 * sigmoid(t[2])).powi(2) * anchor[0];
    let h = (2.0 * sigmoid(t[3])).powi(2) * anchor[1];
    BBox::from_cxcywh(cx, cy, w, h)
}

/// Every `(anchor, cell, class)` candidate with confidence `σ(obj)·σ(cls)`
/// above `conf_thresh`, clipped to the input; degenerate boxes are dropped.
/// Returns one list per image, in scale/anchor/cell/class order.
pub fn decode<T: Float>(raw: &[Tensor<T>; 3], cfg: &NetworkConfig, conf_thresh: f64) -> Vec<Vec<Detection>> {
    let nc = cfg.num_classes;
    let no = 5 + nc;
    let size = cfg.input_size as f64;
    let batch = raw[0].shape().b();
    let mut out = vec![Vec::new(); batch];
    for (si, t) in raw.iter().enumerate() {
        let s = t.shape();
        let stride = STRIDES[si] as f64;
        let anchors = cfg.scale_anchors(si);
        for (b, dets) in out.iter_mut().enumerate() {
            for (a, &anchor) in anchors.iter().enumerate().take(NUM_ANCHORS) {
                for gy in 0..s.h() {
                    for gx in 0..s.w() {
                        let r = |k| raw_at(t, no, b, a, k, gy, gx);
                        let obj = sigmoid(r(4));
                        if obj <= conf_thresh {
                            continue;
                        }
                        let bbox = decode_box([r(0), r(1), r(2), r(3)], gx, gy, stride, anchor).clip(size, size);
                        if bbox.is_degenerate() {
                            continue;
                        }
                        for c in 0..nc {
                            let conf = obj * sigmoid(r(5 + c));
                            if conf > conf_thresh {
                                dets.push(Detection { bbox, class: c, confidence: conf });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-class greedy suppression. Boxes below `conf_thresh` are dropped; the
/// rest are visited by descending confidence (earlier index first on ties)
/// and suppress same-class boxes with IoU ≥ `iou_thresh`. The result is
/// sorted by descending confidence, ties by input order.
pub fn nms(dets: &[Detection], iou_thresh: f64, conf_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].confidence >= conf_thresh).collect();
    order.sort_by(|&i, &j| dets[j].confidence.total_cmp(&dets[i].confidence).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class == dets[i].class && iou_unchecked(&dets[k].bbox, &dets[i].bbox) >= iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

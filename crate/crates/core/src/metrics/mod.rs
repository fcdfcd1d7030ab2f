//! Detection evaluation: greedy matching, average precision, mAP@0.5.

mod report;

pub use report::{ApRow, ApTable, Delta, RowCheck};

use serde::{Deserialize, Serialize};

pub use crate::boxes::{iou, iou_unchecked, BBox, Detection};
use crate::error::{Error, Result};

pub const IOU_THRESH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    pub bbox: BBox,
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// TP flag for each detection, in input order.
    pub tp: Vec<bool>,
    /// Index of the consumed ground-truth box for each TP.
    pub gt_of: Vec<Option<usize>>,
    /// Ground-truth boxes left unmatched.
    pub false_negatives: usize,
}

/// Descending confidence, earlier index first on ties.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].confidence.total_cmp(&dets[i].confidence).then(i.cmp(&j)));
    order
}

/// Visits detections by descending confidence. Each takes the unmatched
/// same-class ground truth of highest IoU (lowest index on ties) and is a
/// TP when that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Result<Matching> {
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    let mut gt_of = vec![None; dets.len()];
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.class != d.class {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= iou_thresh {
                used[g] = true;
                tp[i] = true;
                gt_of[i] = Some(g);
            }
        }
    }
    let false_negatives = used.iter().filter(|u| !**u).count();
    Ok(Matching { tp, gt_of, false_negatives })
}

/// Area under the all-point interpolated precision/recall curve. `flags`
/// are TP markers sorted by descending confidence. Zero when `total_gt` is 0.
pub fn average_precision(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let (recall, precision) = pr_curve(flags, total_gt);
    // envelope: running max from the right
    let mut env = precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &r) in recall.iter().enumerate() {
        if r > prev_r {
            ap += (r - prev_r) * env[i];
            prev_r = r;
        }
    }
    ap
}

/// VOC2007 11-point variant: mean over recall levels 0, 0.1, …, 1 of the
/// best precision at or beyond that recall.
pub fn average_precision_11pt(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let (recall, precision) = pr_curve(flags, total_gt);
    (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            recall
                .iter()
                .zip(&precision)
                .filter(|(r, _)| **r >= t - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

fn pr_curve(flags: &[bool], total_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    (recall, precision)
}

/// Unweighted mean of per-class APs.
pub fn map_at_50(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::Contract("mAP over zero classes".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub class_names: Vec<String>,
    pub ap: Vec<f64>,
    pub map50: f64,
    pub counts: Vec<ClassCounts>,
    /// Classes with no ground truth, whose AP is reported as 0.
    pub undefined: Vec<bool>,
}

impl EvalResult {
    pub fn ap_of(&self, name: &str) -> Option<f64> {
        self.class_names.iter().position(|n| n == name).map(|i| self.ap[i])
    }

    /// Text table: one column per class plus Overall, three decimals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for n in &self.class_names {
            s.push_str(&format!("{n:>10}"));
        }
        s.push_str(&format!("{:>10}\n", "Overall"));
        for (i, ap) in self.ap.iter().enumerate() {
            let flag = if self.undefined[i] { "*" } else { "" };
            s.push_str(&format!("{:>10}", format!("{ap:.3}{flag}")));
        }
        s.push_str(&format!("{:>10.3}\n", self.map50));
        if self.undefined.iter().any(|u| *u) {
            s.push_str("* class has no ground truth; AP reported as 0\n");
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("class,ap50,tp,fp,fn,gt\n");
        for (i, n) in self.class_names.iter().enumerate() {
            let c = &self.counts[i];
            s.push_str(&format!("{n},{:.6},{},{},{},{}\n", self.ap[i], c.tp, c.fp, c.fn_, c.gt));
        }
        s.push_str(&format!("Overall,{:.6},,,,\n", self.map50));
        s
    }
}

/// Per-class AP over a set of images, matched per image.
pub fn evaluate(
    preds: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    class_names: &[String],
    iou_thresh: f64,
) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::Contract(format!("{} prediction lists for {} images", preds.len(), gts.len())));
    }
    let nc = class_names.len();
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); nc];
    let mut counts = vec![ClassCounts::default(); nc];
    for (dets, gt) in preds.iter().zip(gts) {
        if let Some(d) = dets.iter().find(|d| d.class >= nc) {
            return Err(Error::Contract(format!("detection class {} out of range", d.class)));
        }
        for g in gt {
            if g.class >= nc {
                return Err(Error::Contract(format!("ground-truth class {} out of range", g.class)));
            }
            counts[g.class].gt += 1;
        }
        let m = match_detections(dets, gt, iou_thresh)?;
        for i in confidence_order(dets) {
            let c = dets[i].class;
            scored[c].push((dets[i].confidence, m.tp[i]));
            if m.tp[i] {
                counts[c].tp += 1;
            } else {
                counts[c].fp += 1;
            }
        }
    }
    let mut ap = Vec::with_capacity(nc);
    for (c, s) in scored.iter_mut().enumerate() {
        // stable: keeps image order among equal confidences
        s.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = s.iter().map(|x| x.1).collect();
        ap.push(average_precision(&flags, counts[c].gt));
        counts[c].fn_ = counts[c].gt - counts[c].tp;
    }
    let undefined = counts.iter().map(|c| c.gt == 0).collect();
    Ok(EvalResult { class_names: class_names.to_vec(), map50: map_at_50(&ap)?, ap, counts, undefined })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, c: f64) -> Detection {
        Detection { bbox: BBox::new(x, 0.0, x + 10.0, 10.0), class: 0, confidence: c }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        assert_eq!(average_precision(&[false, false], 2), 0.0);
        assert!((average_precision(&[true, false, true], 2) - 0.8333333333333334).abs() < 1e-12);
        assert_eq!(average_precision(&[], 0), 0.0);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let gt = [GtBox { class: 0, bbox: BBox::new(0.0, 0.0, 10.0, 10.0) }];
        let m = match_detections(&[det(0.0, 0.9), det(1.0, 0.8)], &gt, 0.5).unwrap();
        assert_eq!(m.tp, vec![true, false]);
        assert_eq!(m.false_negatives, 0);
        let m = match_detections(&[det(2.5, 0.9)], &gt, 0.5).unwrap();
        assert_eq!(m.tp, vec![true]);
    }

    #[test]
    fn map_examples() {
        assert!((map_at_50(&[0.995, 0.947, 0.927]).unwrap() - 0.956333).abs() < 1e-6);
        assert_eq!(map_at_50(&[0.4]).unwrap(), 0.4);
        assert!(map_at_50(&[]).is_err());
    }
}

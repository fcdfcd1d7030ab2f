#![allow(dead_code)]

use cst_yolo::boxes::{iou_unchecked, Detection};
use cst_yolo::nn::ParamStore;
use cst_yolo::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// AP as a sum over ground-truth ranks: the m-th recall step contributes
/// the best precision reached once m true positives have been seen.
/// Computed exactly as a rational number.
pub fn ap_oracle(flags: &[bool], total_gt: usize) -> (u128, u128) {
    if total_gt == 0 {
        return (0, 1);
    }
    let mut prec: Vec<(u128, u128)> = Vec::new(); // (tp, k) at every prefix
    let mut tp = 0;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as u128;
        prec.push((tp, k as u128 + 1));
    }
    let (mut num, mut den) = (0u128, 1u128);
    for m in 1..=total_gt as u128 {
        // max tp/k over prefixes with tp >= m
        let best = prec.iter().filter(|(t, _)| *t >= m).fold(None, |acc: Option<(u128, u128)>, &(t, k)| match acc {
            Some((bt, bk)) if bt * k >= t * bk => Some((bt, bk)),
            _ => Some((t, k)),
        });
        if let Some((t, k)) = best {
            num = num * k + t * den;
            den *= k;
        }
    }
    (num, den * total_gt as u128)
}

/// Brute force: the kept set is the unique subset K with
/// `i ∈ K ⇔ no k ∈ K ranked above i suppresses i`, found by enumeration.
pub fn nms_oracle(dets: &[Detection], iou_t: f64, conf_t: f64) -> Vec<Detection> {
    let cand: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].confidence >= conf_t).collect();
    let rank = |i: usize, j: usize| {
        // i ranked above j
        dets[i].confidence > dets[j].confidence || (dets[i].confidence == dets[j].confidence && i < j)
    };
    let mut found = Vec::new();
    for mask in 0u32..(1 << cand.len()) {
        let inside = |i: usize| mask >> cand.iter().position(|&c| c == i).unwrap() & 1 == 1;
        let consistent = cand.iter().all(|&i| {
            let blocked = cand.iter().any(|&k| {
                k != i
                    && inside(k)
                    && rank(k, i)
                    && dets[k].class == dets[i].class
                    && iou_unchecked(&dets[k].bbox, &dets[i].bbox) >= iou_t
            });
            inside(i) == !blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "kept set must be unique");
    let mut kept: Vec<usize> = cand.iter().copied().filter(|&i| found[0] >> cand.iter().position(|&c| c == i).unwrap() & 1 == 1).collect();
    kept.sort_by(|&i, &j| if rank(i, j) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Random BN statistics and affine terms on the RepConv branches, so that
/// folding has something to fold.
pub fn perturb_bn<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    for (name, p) in store.iter_mut() {
        if !(name.contains(".dense.bn") || name.contains(".pw.bn")) {
            continue;
        }
        let (lo, hi) = match name.rsplit('.').next().unwrap() {
            "running_var" => (0.5, 2.0),
            "weight" => (0.5, 1.5),
            _ => (-0.5, 0.5),
        };
        for v in p.value.data_mut() {
            *v = T::cast_f64(rng.random_range(lo..hi));
        }
    }
}

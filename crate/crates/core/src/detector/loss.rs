//! Composite detection loss: CIoU box term, BCE objectness against the IoU
//! of each matched prediction, BCE classification.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tape, Tensor, UnaryKind, Var};

use super::config::{LossConfig, NetworkConfig};
use super::head::NUM_ANCHORS;

const EPS: f64 = 1e-7;
/// Neighbour-cell offset threshold.
const NEIGHBOUR_G: f64 = 0.5;

/// A ground-truth box with centre/size normalised to the input side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub image: usize,
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// One (target, anchor, cell) assignment at a single scale, in grid units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub anchor: usize,
    pub gi: usize,
    pub gj: usize,
    /// `(x, y)` offset from the cell corner and `(w, h)`.
    pub tbox: [f64; 4],
    pub class: usize,
    pub anchor_wh: [f64; 2],
}

/// Matches targets to anchors whose side ratio stays under `anchor_t`, and
/// to up to two neighbouring cells nearest the target centre.
pub fn build_targets(
    targets: &[Target],
    anchors_px: [[f64; 2]; 3],
    stride: f64,
    grid: (usize, usize),
    anchor_t: f64,
) -> Vec<Assignment> {
    let (gh, gw) = grid;
    let mut out = Vec::new();
    for t in targets {
        let gx = t.cx * gw as f64;
        let gy = t.cy * gh as f64;
        let tw = t.w * gw as f64;
        let th = t.h * gh as f64;
        let gxi = gw as f64 - gx;
        let gyi = gh as f64 - gy;
        let mut offsets = vec![(0.0, 0.0)];
        if gx % 1.0 < NEIGHBOUR_G && gx > 1.0 {
            offsets.push((NEIGHBOUR_G, 0.0));
        }
        if gy % 1.0 < NEIGHBOUR_G && gy > 1.0 {
            offsets.push((0.0, NEIGHBOUR_G));
        }
        if gxi % 1.0 < NEIGHBOUR_G && gxi > 1.0 {
            offsets.push((-NEIGHBOUR_G, 0.0));
        }
        if gyi % 1.0 < NEIGHBOUR_G && gyi > 1.0 {
            offsets.push((0.0, -NEIGHBOUR_G));
        }
        for (a, anc) in anchors_px.iter().enumerate() {
            let aw = anc[0] / stride;
            let ah = anc[1] / stride;
            let rw = tw / aw;
            let rh = th / ah;
            let worst = rw.max(1.0 / rw).max(rh.max(1.0 / rh));
            if !(worst < anchor_t) {
                continue;
            }
            for &(ox, oy) in &offsets {
                let gi = ((gx - ox).floor().max(0.0) as usize).min(gw - 1);
                let gj = ((gy - oy).floor().max(0.0) as usize).min(gh - 1);
                out.push(Assignment {
                    image: t.image,
                    anchor: a,
                    gi,
                    gj,
                    tbox: [gx - gi as f64, gy - gj as f64, tw, th],
                    class: t.class,
                    anchor_wh: [aw, ah],
                });
            }
        }
    }
    out
}

/// Differentiable CIoU between predicted `(x, y, w, h)` vars and constant
/// targets, all shaped `(1, 1, 1, n)`. Returns the CIoU var.
pub fn ciou<T: Float>(tape: &mut Tape<T>, p: [Var; 4], t: &[[f64; 4]]) -> Result<Var> {
    let n = t.len();
    let shape = Shape::new(1, 1, 1, n);
    let col = |tape: &mut Tape<T>, f: &dyn Fn(&[f64; 4]) -> f64| {
        tape.constant(Tensor::from_parts(shape, t.iter().map(|b| T::cast_f64(f(b))).collect()))
    };
    let tx1 = col(tape, &|b| b[0] - b[2] / 2.0);
    let tx2 = col(tape, &|b| b[0] + b[2] / 2.0);
    let ty1 = col(tape, &|b| b[1] - b[3] / 2.0);
    let ty2 = col(tape, &|b| b[1] + b[3] / 2.0);
    let tw = col(tape, &|b| b[2]);
    let th = col(tape, &|b| b[3] + EPS);
    let t_area = col(tape, &|b| b[2] * (b[3] + EPS));

    let [px, py, pw, ph] = p;
    let hw = tape.scale(pw, 0.5);
    let hh = tape.scale(ph, 0.5);
    let px1 = tape.sub(px, hw)?;
    let px2 = tape.add(px, hw)?;
    let py1 = tape.sub(py, hh)?;
    let py2 = tape.add(py, hh)?;

    let ix2 = tape.minimum(px2, tx2)?;
    let ix1 = tape.maximum(px1, tx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let iy2 = tape.minimum(py2, ty2)?;
    let iy1 = tape.maximum(py1, ty1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let ph_e = tape.affine(ph, 1.0, EPS);
    let p_area = tape.mul(pw, ph_e)?;
    let union = tape.add(p_area, t_area)?;
    let union = tape.sub(union, inter)?;
    let union = tape.affine(union, 1.0, EPS);
    let iou = tape.div(inter, union)?;

    // enclosing box diagonal
    let cx2 = tape.maximum(px2, tx2)?;
    let cx1 = tape.minimum(px1, tx1)?;
    let cw = tape.sub(cx2, cx1)?;
    let cy2 = tape.maximum(py2, ty2)?;
    let cy1 = tape.minimum(py1, ty1)?;
    let ch = tape.sub(cy2, cy1)?;
    let cw2 = tape.square(cw);
    let ch2 = tape.square(ch);
    let c2 = tape.add(cw2, ch2)?;
    let c2 = tape.affine(c2, 1.0, EPS);

    // centre distance
    let tcx = col(tape, &|b| b[0]);
    let tcy = col(tape, &|b| b[1]);
    let dx = tape.sub(px, tcx)?;
    let dy = tape.sub(py, tcy)?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let rho2 = tape.add(dx2, dy2)?;
    let dist = tape.div(rho2, c2)?;

    // aspect consistency
    let tr = tape.div(tw, th)?;
    let ta = tape.unary(tr, UnaryKind::Atan);
    let pr = tape.div(pw, ph_e)?;
    let pa = tape.unary(pr, UnaryKind::Atan);
    let da = tape.sub(ta, pa)?;
    let v = tape.square(da);
    let v = tape.scale(v, 4.0 / (PI * PI));
    let denom = tape.sub(v, iou)?;
    let denom = tape.affine(denom, 1.0, 1.0 + EPS);
    let alpha = tape.div(v, denom)?;
    let av = tape.mul(alpha, v)?;

    let pen = tape.add(dist, av)?;
    tape.sub(iou, pen)
}

/// Loss value plus the per-term breakdown used for logging.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// `(box + obj + cls) · batch`.
    pub total: Var,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    /// Objectness targets per scale, flattened `(B, 3, H, W)`.
    pub obj_targets: [Vec<f64>; 3],
}

/// Loss over the three raw head maps. With `frozen_obj` the objectness
/// targets are taken as given instead of from the current IoUs.
pub fn compute_loss<T: Float>(
    tape: &mut Tape<T>,
    raw: [Var; 3],
    targets: &[Target],
    net: &NetworkConfig,
    lc: &LossConfig,
    frozen_obj: Option<&[Vec<f64>; 3]>,
) -> Result<LossOutput> {
    let nc = net.num_classes;
    let no = 5 + nc;
    let batch = tape.shape(raw[0]).b();
    if let Some(t) = targets.iter().find(|t| t.image >= batch || t.class >= nc) {
        return Err(Error::Contract(format!("target {t:?} outside batch {batch} / {nc} classes")));
    }
    let mut lbox: Option<Var> = None;
    let mut lobj: Option<Var> = None;
    let mut lcls: Option<Var> = None;
    let mut obj_targets: [Vec<f64>; 3] = Default::default();
    let accumulate = |tape: &mut Tape<T>, acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };

    for (si, &r) in raw.iter().enumerate() {
        let s = tape.shape(r);
        if s.c() != NUM_ANCHORS * no {
            return Err(crate::error::shape_err!("loss: head map {si} has {} channels, expected {}", s.c(), NUM_ANCHORS * no));
        }
        let (h, w) = (s.h(), s.w());
        let stride = net.input_size as f64 / w as f64;
        let flat = |b: usize, a: usize, k: usize, y: usize, x: usize| (((b * s.c() + a * no + k) * h + y) * w + x) as u32;
        let matches = build_targets(targets, net.scale_anchors(si), stride, (h, w), lc.anchor_t);
        let mut tobj = vec![0.0; batch * NUM_ANCHORS * h * w];
        let tobj_at = |m: &Assignment| ((m.image * NUM_ANCHORS + m.anchor) * h + m.gj) * w + m.gi;

        if !matches.is_empty() {
            let n = matches.len();
            let pick = |tape: &mut Tape<T>, k: usize| {
                let idx: Arc<[u32]> = matches.iter().map(|m| flat(m.image, m.anchor, k, m.gj, m.gi)).collect();
                tape.gather(r, idx, Shape::new(1, 1, 1, n))
            };
            let anchor_col = |tape: &mut Tape<T>, d: usize| {
                let v = matches.iter().map(|m| T::cast_f64(m.anchor_wh[d])).collect();
                tape.constant(Tensor::from_parts(Shape::new(1, 1, 1, n), v))
            };
            let mut p = Vec::with_capacity(4);
            for k in 0..4 {
                let raw_k = pick(tape, k)?;
                let sg = tape.sigmoid(raw_k);
                p.push(if k < 2 {
                    tape.affine(sg, 2.0, -0.5)
                } else {
                    let s2 = tape.scale(sg, 2.0);
                    let sq = tape.square(s2);
                    let anc = anchor_col(tape, k - 2);
                    tape.mul(sq, anc)?
                });
            }
            let p = [p[0], p[1], p[2], p[3]];
            let tboxes: Vec<[f64; 4]> = matches.iter().map(|m| m.tbox).collect();
            let iou = ciou(tape, p, &tboxes)?;
            let one_minus = tape.affine(iou, -1.0, 1.0);
            let term = tape.mean(one_minus);
            accumulate(tape, &mut lbox, term)?;

            let iou_v = tape.value(iou).data().to_vec();
            for (m, v) in matches.iter().zip(iou_v) {
                tobj[tobj_at(m)] = v.as_f64().max(0.0);
            }

            if nc > 1 {
                let idx: Arc<[u32]> = matches
                    .iter()
                    .flat_map(|m| (0..nc).map(move |c| flat(m.image, m.anchor, 5 + c, m.gj, m.gi)))
                    .collect();
                let logits = tape.gather(r, idx, Shape::new(1, 1, n, nc))?;
                let mut tc = vec![T::zero(); n * nc];
                for (i, m) in matches.iter().enumerate() {
                    tc[i * nc + m.class] = T::one();
                }
                let bce = tape.bce_with_logits_sum(logits, &tc)?;
                let term = tape.scale(bce, 1.0 / (n * nc) as f64);
                accumulate(tape, &mut lcls, term)?;
            }
        }

        if let Some(frozen) = frozen_obj {
            if frozen[si].len() != tobj.len() {
                return Err(Error::Contract(format!("frozen objectness targets for scale {si} have the wrong length")));
            }
            tobj.clone_from(&frozen[si]);
        }
        let idx: Arc<[u32]> = (0..batch)
            .flat_map(|b| (0..NUM_ANCHORS).flat_map(move |a| (0..h).flat_map(move |y| (0..w).map(move |x| flat(b, a, 4, y, x)))))
            .collect();
        let obj = tape.gather(r, idx, Shape::new(batch, NUM_ANCHORS, h, w))?;
        let tt: Vec<T> = tobj.iter().map(|&v| T::cast_f64(v)).collect();
        let bce = tape.bce_with_logits_sum(obj, &tt)?;
        let term = tape.scale(bce, lc.balance[si] / tt.len() as f64);
        accumulate(tape, &mut lobj, term)?;
        obj_targets[si] = tobj;
    }

    let lobj = lobj.expect("three scales");
    let value = |tape: &Tape<T>, v: Option<Var>, g: f64| v.map_or(0.0, |v| tape.value(v).data()[0].as_f64() * g);
    let box_loss = value(tape, lbox, lc.box_gain);
    let obj_loss = value(tape, Some(lobj), lc.obj_gain);
    let cls_loss = value(tape, lcls, lc.cls_gain);

    let mut total = tape.scale(lobj, lc.obj_gain);
    if let Some(v) = lbox {
        let v = tape.scale(v, lc.box_gain);
        total = tape.add(total, v)?;
    }
    if let Some(v) = lcls {
        let v = tape.scale(v, lc.cls_gain);
        total = tape.add(total, v)?;
    }
    let total = tape.scale(total, batch as f64);
    Ok(LossOutput { total, box_loss, obj_loss, cls_loss, obj_targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_target_has_no_neighbours() {
        let t = Target { image: 0, class: 0, cx: 0.5 / 8.0 + 0.25, cy: 0.5 / 8.0 + 0.25, w: 0.1, h: 0.1 };
        let m = build_targets(&[t], [[10.0, 10.0], [100.0, 100.0], [6.0, 7.0]], 8.0, (8, 8), 4.0);
        // 64px input: 6.4px box matches the 10px and 6x7px anchors only
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|a| a.gi == 2 && a.gj == 2 && (a.tbox[0] - 0.5).abs() < 1e-12));
    }

    #[test]
    fn off_centre_target_gets_two_neighbours() {
        let t = Target { image: 0, class: 0, cx: 2.2 / 8.0, cy: 5.8 / 8.0, w: 0.1, h: 0.1 };
        let m = build_targets(&[t], [[6.4, 6.4]; 3], 8.0, (8, 8), 4.0);
        let cells: Vec<(usize, usize)> = m.iter().take(3).map(|a| (a.gi, a.gj)).collect();
        assert_eq!(cells, vec![(2, 5), (1, 5), (2, 6)]);
        assert!((m[1].tbox[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn ciou_of_identical_boxes_is_one() {
        let mut tape = Tape::<f64>::new();
        let b = [1.5, 2.0, 3.0, 1.0];
        let v = |tape: &mut Tape<f64>, x: f64| tape.constant(Tensor::scalar(x));
        let p = [v(&mut tape, b[0]), v(&mut tape, b[1]), v(&mut tape, b[2]), v(&mut tape, b[3])];
        let c = ciou(&mut tape, p, &[b]).unwrap();
        assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-6);
    }
}

//! The standing finite-difference suite: every differentiable tape op,
//! every block, the detection head and the loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::blocks::{Cbs, CbsConcat, Elan, MpConv, RepConv, Sppcspc};
use crate::detector::{compute_loss, Arch, IDetect, LossConfig, NetworkConfig, Target};
use crate::error::Result;
use crate::fusion::{welan_backbone, welan_neck, CatConv, Cst, Mcs, SwinBlock, SwinConfig, WElanVariant};
use crate::nn::{Ctx, Module, ParamStore};
use crate::tensor::{PoolKind, Tensor, UnaryKind, Var, GATHER_ZERO};

pub const OP_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tol)
    }
}

fn rand_t(shape: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, lo, hi, &mut rng)
}

struct Runner {
    cases: Vec<SuiteCase>,
    empty: ParamStore<f64>,
}

impl Runner {
    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, h: f64, f: F) -> Result<()>
    where
        F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
    {
        let opts = GradCheckOptions { h, seed: self.cases.len() as u64, max_coords: Some(24) };
        let report = check_gradients(name, &self.empty, &inputs, f, &opts)?;
        self.cases.push(SuiteCase { name: name.to_string(), tol: OP_TOL, report });
        Ok(())
    }

    fn module<M: Module>(&mut self, name: &str, m: &M, shape: [usize; 4], h: f64) -> Result<()> {
        let store = ParamStore::<f64>::from_specs(&m.specs(), 11)?;
        let x = rand_t(shape, -1.0, 1.0, 5);
        let opts = GradCheckOptions { h, seed: 3, max_coords: Some(12) };
        let report = check_gradients(name, &store, &[x], |cx, xs| m.forward(cx, xs[0]), &opts)?;
        self.cases.push(SuiteCase { name: name.to_string(), tol: OP_TOL, report });
        Ok(())
    }
}

/// Runs every check. Inputs never exceed `2×16×16×16` elements.
pub fn run_suite() -> Result<Vec<SuiteCase>> {
    let mut r = Runner { cases: Vec::new(), empty: ParamStore::new() };
    ops(&mut r)?;
    modules(&mut r)?;
    head_and_loss(&mut r)?;
    Ok(r.cases)
}

fn ops(r: &mut Runner) -> Result<()> {
    let x = |s| rand_t([2, 3, 6, 6], -1.0, 1.0, s);
    r.op(
        "conv2d 3x3 s1 p1",
        vec![x(1), rand_t([4, 3, 3, 3], -0.5, 0.5, 2), rand_t([1, 4, 1, 1], -0.5, 0.5, 3)],
        1e-3,
        |cx, v| cx.tape.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    )?;
    r.op(
        "conv2d 1x1 s2 p0",
        vec![rand_t([2, 4, 7, 7], -1.0, 1.0, 4), rand_t([3, 4, 1, 1], -0.5, 0.5, 5)],
        1e-3,
        |cx, v| cx.tape.conv2d(v[0], v[1], None, 2, 0),
    )?;
    r.op(
        "conv2d 3x3 s2 p1",
        vec![rand_t([2, 2, 7, 7], -1.0, 1.0, 6), rand_t([3, 2, 3, 3], -0.5, 0.5, 7)],
        1e-3,
        |cx, v| cx.tape.conv2d(v[0], v[1], None, 2, 1),
    )?;
    let affine = |s| vec![x(s), rand_t([1, 3, 1, 1], 0.5, 1.5, s + 1), rand_t([1, 3, 1, 1], -0.5, 0.5, s + 2)];
    r.op("batch_norm train", affine(8), 1e-4, |cx, v| Ok(cx.tape.batch_norm(v[0], v[1], v[2], 1e-3, None)?.y))?;
    r.op("batch_norm eval", affine(11), 1e-3, |cx, v| {
        let (m, var) = ([0.1, -0.2, 0.3], [0.5, 1.0, 2.0]);
        Ok(cx.tape.batch_norm(v[0], v[1], v[2], 1e-3, Some((&m, &var)))?.y)
    })?;

    let unaries: [(&str, UnaryKind, f64, f64); 9] = [
        ("sigmoid", UnaryKind::Sigmoid, -3.0, 3.0),
        ("silu", UnaryKind::Silu, -3.0, 3.0),
        ("relu", UnaryKind::Relu, -1.0, 1.0),
        ("leaky_relu", UnaryKind::LeakyRelu(0.1), -1.0, 1.0),
        ("exp", UnaryKind::Exp, -1.0, 1.0),
        ("atan", UnaryKind::Atan, -2.0, 2.0),
        ("square", UnaryKind::Square, -1.0, 1.0),
        ("sqrt", UnaryKind::Sqrt, 0.5, 1.5),
        ("affine", UnaryKind::Affine { scale: -1.7, shift: 0.3 }, -1.0, 1.0),
    ];
    for (i, (name, kind, lo, hi)) in unaries.into_iter().enumerate() {
        let h = if matches!(kind, UnaryKind::Relu | UnaryKind::LeakyRelu(_)) { 1e-6 } else { 1e-3 };
        r.op(name, vec![rand_t([2, 3, 4, 4], lo, hi, 20 + i as u64)], h, move |cx, v| Ok(cx.tape.unary(v[0], kind)))?;
    }

    type BinFn = fn(&mut crate::tensor::Tape<f64>, Var, Var) -> Result<Var>;
    let binaries: [(&str, BinFn, f64); 6] = [
        ("add", |t, a, b| t.add(a, b), 1e-3),
        ("sub", |t, a, b| t.sub(a, b), 1e-3),
        ("mul", |t, a, b| t.mul(a, b), 1e-3),
        ("div", |t, a, b| t.div(a, b), 1e-3),
        ("maximum", |t, a, b| t.maximum(a, b), 1e-6),
        ("minimum", |t, a, b| t.minimum(a, b), 1e-6),
    ];
    for (i, (name, f, h)) in binaries.into_iter().enumerate() {
        let s = 40 + 2 * i as u64;
        r.op(
            &format!("{name} broadcast"),
            vec![rand_t([2, 3, 4, 4], -1.0, 1.0, s), rand_t([1, 3, 1, 4], 0.5, 1.5, s + 1)],
            h,
            move |cx, v| f(&mut cx.tape, v[0], v[1]),
        )?;
        r.op(
            name,
            vec![rand_t([2, 3, 4, 4], -1.0, 1.0, s + 100), rand_t([2, 3, 4, 4], 0.5, 1.5, s + 101)],
            h,
            move |cx, v| f(&mut cx.tape, v[0], v[1]),
        )?;
    }

    let m = || vec![rand_t([2, 3, 7, 7], -1.0, 1.0, 60)];
    r.op("max_pool k3 s1 p1", m(), 1e-6, |cx, v| cx.tape.pool2d(v[0], PoolKind::Max, 3, 1, 1))?;
    r.op("max_pool k2 s2", m(), 1e-6, |cx, v| cx.tape.pool2d(v[0], PoolKind::Max, 2, 2, 0))?;
    r.op("avg_pool k3 s2 p1", m(), 1e-3, |cx, v| cx.tape.pool2d(v[0], PoolKind::Avg, 3, 2, 1))?;
    r.op("adaptive_avg_pool 7->3", m(), 1e-3, |cx, v| cx.tape.adaptive_avg_pool(v[0], 3, 3))?;
    r.op("upsample_nearest", m(), 1e-3, |cx, v| cx.tape.upsample_nearest(v[0], 14, 14))?;

    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let idx: Arc<[u32]> = (0..40).map(|i| if i % 7 == 3 { GATHER_ZERO } else { rng.random_range(0..24u32) }).collect();
    r.op("gather", vec![rand_t([1, 2, 3, 4], -1.0, 1.0, 62)], 1e-3, move |cx, v| {
        cx.tape.gather(v[0], idx.clone(), [1, 1, 5, 8])
    })?;
    r.op(
        "concat",
        vec![rand_t([2, 2, 3, 3], -1.0, 1.0, 63), rand_t([2, 3, 3, 3], -1.0, 1.0, 64)],
        1e-3,
        |cx, v| cx.tape.concat(&[v[1], v[0]]),
    )?;
    r.op("slice_channels", vec![rand_t([2, 5, 3, 3], -1.0, 1.0, 65)], 1e-3, |cx, v| cx.tape.slice_channels(v[0], 1, 3))?;
    r.op("split", vec![rand_t([2, 4, 3, 3], -1.0, 1.0, 66)], 1e-3, |cx, v| {
        let parts = cx.tape.split(v[0], 2)?;
        let a = cx.tape.scale(parts[0], 2.0);
        cx.tape.mul(a, parts[1])
    })?;
    r.op("reshape", vec![rand_t([2, 4, 3, 3], -1.0, 1.0, 67)], 1e-3, |cx, v| {
        let y = cx.tape.reshape(v[0], [1, 2, 6, 6])?;
        Ok(cx.tape.softmax(y))
    })?;

    for (i, (ta, tb)) in [(false, false), (true, false), (false, true), (true, true)].into_iter().enumerate() {
        let a = if ta { [2, 1, 4, 3] } else { [2, 1, 3, 4] };
        let b = if tb { [2, 1, 5, 4] } else { [2, 1, 4, 5] };
        r.op(
            &format!("matmul ta={ta} tb={tb}"),
            vec![rand_t(a, -1.0, 1.0, 70 + i as u64), rand_t(b, -1.0, 1.0, 80 + i as u64)],
            1e-3,
            move |cx, v| cx.tape.matmul(v[0], v[1], ta, tb),
        )?;
    }
    r.op(
        "matmul shared rhs",
        vec![rand_t([2, 3, 3, 4], -1.0, 1.0, 90), rand_t([1, 1, 4, 2], -1.0, 1.0, 91)],
        1e-3,
        |cx, v| cx.tape.matmul(v[0], v[1], false, false),
    )?;
    r.op("softmax", vec![rand_t([2, 2, 3, 5], -2.0, 2.0, 92)], 1e-3, |cx, v| Ok(cx.tape.softmax(v[0])))?;
    r.op(
        "layer_norm",
        vec![
            rand_t([1, 2, 3, 6], -1.0, 1.0, 93),
            rand_t([1, 1, 1, 6], 0.5, 1.5, 94),
            rand_t([1, 1, 1, 6], -0.5, 0.5, 95),
        ],
        1e-4,
        |cx, v| cx.tape.layer_norm(v[0], v[1], v[2], 1e-5),
    )?;
    r.op("weight_norm", vec![rand_t([1, 1, 1, 4], 0.2, 1.0, 96)], 1e-4, |cx, v| cx.tape.weight_norm(v[0], 1e-4))?;
    r.op("sum_scaled", vec![rand_t([2, 3, 2, 2], -1.0, 1.0, 97)], 1e-3, |cx, v| Ok(cx.tape.sum_scaled(v[0], 0.7)))?;
    r.op("mean", vec![rand_t([2, 3, 2, 2], -1.0, 1.0, 98)], 1e-3, |cx, v| Ok(cx.tape.mean(v[0])))?;
    let targets: Vec<f64> = rand_t([1, 1, 4, 6], 0.0, 1.0, 99).into_data();
    r.op("bce_with_logits_sum", vec![rand_t([1, 1, 4, 6], -4.0, 4.0, 100)], 1e-3, move |cx, v| {
        cx.tape.bce_with_logits_sum(v[0], &targets)
    })?;
    Ok(())
}

fn modules(r: &mut Runner) -> Result<()> {
    let cfg = SwinConfig { window: 4, heads: 2, ..SwinConfig::default() };
    r.module("cbs", &Cbs::cbs("c", 3, 4, 3, 2), [2, 3, 8, 8], 1e-5)?;
    r.module("elan", &Elan::backbone("e", 4, 4, 8), [2, 4, 8, 8], 1e-5)?;
    r.module("mpconv", &MpConv::new("m", 4, 4), [2, 4, 8, 8], 1e-6)?;
    r.module("cbsconcat", &CbsConcat::new("m", 4, 4), [2, 4, 8, 8], 1e-5)?;
    r.module("sppcspc", &Sppcspc::new("s", 8, 4), [2, 8, 8, 8], 1e-6)?;
    r.module("repconv", &RepConv::new("r", 4, 4), [2, 4, 8, 8], 1e-5)?;
    r.module("swin_block", &SwinBlock::new("s", 8, cfg.clone()), [1, 8, 8, 8], 1e-5)?;
    r.module("cst_forward", &Cst::new("c", 8, 8, cfg), [1, 8, 8, 8], 1e-5)?;
    r.module("welan_forward v1", &welan_backbone("w", 8, 4, 8, WElanVariant::V1), [1, 8, 8, 8], 1e-5)?;
    r.module("welan_forward v2", &welan_neck("w", 8, 4, 2, 8, WElanVariant::V2), [1, 8, 8, 8], 1e-5)?;
    r.module("mcs_forward", &Mcs::new("m", 8, 256), [1, 8, 8, 8], 1e-5)?;
    r.module("catconv_forward", &CatConv::new("c", 8, 4), [1, 8, 8, 8], 1e-5)?;
    Ok(())
}

/// Tiny two-class config at a 64-pixel input: head maps 8², 4², 2².
pub fn toy_loss_config() -> NetworkConfig {
    NetworkConfig::new(Arch::CstYolo, 2, 64, 0.25)
}

pub fn toy_targets() -> Vec<Target> {
    vec![
        Target { image: 0, class: 1, cx: 0.31, cy: 0.42, w: 0.22, h: 0.3 },
        Target { image: 1, class: 0, cx: 0.7, cy: 0.55, w: 0.5, h: 0.4 },
    ]
}

fn head_and_loss(r: &mut Runner) -> Result<()> {
    let cfg = toy_loss_config();
    let head = IDetect::new("h", [4, 4, 4], &cfg);
    let mut specs = Vec::new();
    head.param_specs(&mut specs);
    let mut store = ParamStore::<f64>::from_specs(&specs, 12)?;
    // move the implicit vectors off their identity init
    for i in 0..3 {
        for (name, lo, hi) in [(format!("h.ia{i}"), -0.3, 0.3), (format!("h.im{i}"), 0.7, 1.3)] {
            let t = store.tensor(&name)?.shape();
            store.set(&name, rand_t(t.0, lo, hi, 13 + i as u64))?;
        }
    }
    let feats: Vec<Tensor<f64>> = [8, 4, 2].iter().enumerate().map(|(i, &g)| rand_t([2, 4, g, g], -1.0, 1.0, 14 + i as u64)).collect();
    let opts = GradCheckOptions { h: 1e-5, seed: 5, max_coords: Some(12) };
    // flatten all three maps into one channel vector; the checker projects it
    let report = check_gradients(
        "idetect_head",
        &store,
        &feats,
        |cx, v| {
            let out = head.forward(cx, [v[0], v[1], v[2]])?;
            let mut flat = Vec::with_capacity(3);
            for o in out {
                let n = cx.tape.shape(o).numel();
                flat.push(cx.tape.reshape(o, [1, n, 1, 1])?);
            }
            cx.tape.concat(&flat)
        },
        &opts,
    )?;
    r.cases.push(SuiteCase { name: "idetect_head".into(), tol: OP_TOL, report });

    let no = 3 * (5 + cfg.num_classes);
    let raw: Vec<Tensor<f64>> = [8, 4, 2].iter().enumerate().map(|(i, &g)| rand_t([2, no, g, g], -1.5, 1.5, 30 + i as u64)).collect();
    let targets = toy_targets();
    let lc = LossConfig::default();
    let frozen = {
        let mut tape = crate::tensor::Tape::<f64>::new();
        let vars = [0, 1, 2].map(|i| tape.constant(raw[i].clone()));
        compute_loss(&mut tape, vars, &targets, &cfg, &lc, None)?.obj_targets
    };
    let opts = GradCheckOptions { h: 1e-6, seed: 6, max_coords: Some(48) };
    let empty = ParamStore::<f64>::new();
    let report = check_gradients("compute_loss", &empty, &raw, |cx, v| {
        Ok(compute_loss(&mut cx.tape, [v[0], v[1], v[2]], &targets, &cfg, &lc, Some(&frozen))?.total)
    }, &opts)?;
    r.cases.push(SuiteCase { name: "compute_loss".into(), tol: LOSS_TOL, report });
    Ok(())
}

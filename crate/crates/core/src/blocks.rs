//! YOLOv7 building blocks: CBS, ELAN, SPPCSPC, MP/CBSConcat downsampling and
//! RepConv with inference-time re-parameterisation.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnAct, Ctx, Init, Module, ParamSpec, ParamStore, Role, BN_EPS};
use crate::tensor::{Float, PoolKind, Shape, Tensor, Var};

pub type Cbs = ConvBnAct;

/// Small positive constant of the fusion-weight normaliser.
pub const FUSE_XI: f64 = 1e-4;

/// Which ELAN taps are scaled by learned fusion weights before the merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TapWeighting {
    /// Plain concatenation.
    None,
    /// Every tap gets a weight.
    All,
    /// Only taps coming out of the stacked 3×3 chain.
    Deep,
}

/// ELAN aggregation: two 1×1 projections of the input, a chain of 3×3 convs
/// grown from the second one, a concatenation of selected taps and a 1×1
/// merge.
///
/// Concatenation order follows YOLOv7: tapped chain outputs from deepest to
/// shallowest, then the second projection, then the first.
#[derive(Clone, Debug, PartialEq)]
pub struct Elan {
    pub name: String,
    pub proj_a: Cbs,
    pub proj_b: Cbs,
    pub chain: Vec<Cbs>,
    /// Chain indices concatenated, in concatenation order.
    pub taps: Vec<usize>,
    pub merge: Cbs,
    pub weighting: TapWeighting,
}

impl Elan {
    /// Backbone ELAN: four 3×3 convs of width `mid`, taps after the 2nd and 4th.
    pub fn backbone(name: &str, cin: usize, mid: usize, cout: usize) -> Self {
        Self::build(name, cin, mid, mid, vec![3, 1], cout)
    }

    /// Neck ELAN (ELAN-H): 3×3 convs of width `deep`, all four tapped.
    pub fn neck(name: &str, cin: usize, mid: usize, deep: usize, cout: usize) -> Self {
        Self::build(name, cin, mid, deep, vec![3, 2, 1, 0], cout)
    }

    fn build(name: &str, cin: usize, mid: usize, deep: usize, taps: Vec<usize>, cout: usize) -> Self {
        let chain = (0..4)
            .map(|i| Cbs::cbs(&format!("{name}.m{i}"), if i == 0 { mid } else { deep }, deep, 3, 1))
            .collect();
        let cat = 2 * mid + taps.len() * deep;
        Elan {
            name: name.to_string(),
            proj_a: Cbs::cbs(&format!("{name}.cv1"), cin, mid, 1, 1),
            proj_b: Cbs::cbs(&format!("{name}.cv2"), cin, mid, 1, 1),
            chain,
            taps,
            merge: Cbs::cbs(&format!("{name}.cv3"), cat, cout, 1, 1),
            weighting: TapWeighting::None,
        }
    }

    pub fn with_weighting(mut self, w: TapWeighting) -> Self {
        self.weighting = w;
        self
    }

    pub fn cout(&self) -> usize {
        self.merge.cout()
    }

    /// Channel count entering the merge conv.
    pub fn concat_channels(&self) -> usize {
        self.merge.conv.cin
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len() + 2
    }

    /// Number of learned fusion weights.
    pub fn num_weights(&self) -> usize {
        match self.weighting {
            TapWeighting::None => 0,
            TapWeighting::All => self.num_taps(),
            TapWeighting::Deep => self.taps.len(),
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.fuse_w", self.name)
    }

    /// Pre-merge tap tensors in concatenation order, after optional weighting.
    pub fn taps_forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let a = self.proj_a.forward(cx, x)?;
        let b = self.proj_b.forward(cx, x)?;
        let mut outs = Vec::with_capacity(self.chain.len());
        let mut cur = b;
        for conv in &self.chain {
            cur = conv.forward(cx, cur)?;
            outs.push(cur);
        }
        let mut taps: Vec<Var> = self.taps.iter().map(|&i| outs[i]).collect();
        taps.push(b);
        taps.push(a);
        if self.weighting == TapWeighting::None {
            return Ok(taps);
        }
        let raw = cx.param(&self.weight_name())?;
        let w = cx.tape.weight_norm(raw, FUSE_XI)?;
        for (i, t) in taps.iter_mut().take(self.num_weights()).enumerate() {
            let wi = cx.tape.gather(w, Arc::from(vec![i as u32]), [1, 1, 1, 1])?;
            *t = cx.tape.mul(*t, wi)?;
        }
        Ok(taps)
    }
}

impl Module for Elan {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.proj_a.param_specs(out);
        self.proj_b.param_specs(out);
        for c in &self.chain {
            c.param_specs(out);
        }
        self.merge.param_specs(out);
        if self.weighting != TapWeighting::None {
            out.push(ParamSpec::new(self.weight_name(), [1, 1, 1, self.num_weights()], Init::Const(1.0), Role::Scale));
        }
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let taps = self.taps_forward(cx, x)?;
        let cat = cx.tape.concat(&taps)?;
        self.merge.forward(cx, cat)
    }
}

/// SPP wrapped in a CSP split, YOLOv7 channel plan: hidden width equals the
/// output width.
#[derive(Clone, Debug, PartialEq)]
pub struct Sppcspc {
    pub cv: [Cbs; 7],
    pub pools: [usize; 3],
}

impl Sppcspc {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        let h = cout;
        let c = |i: usize, a, b, k| Cbs::cbs(&format!("{name}.cv{i}"), a, b, k, 1);
        Sppcspc {
            cv: [
                c(1, cin, h, 1),
                c(2, cin, h, 1),
                c(3, h, h, 3),
                c(4, h, h, 1),
                c(5, 4 * h, h, 1),
                c(6, h, h, 3),
                c(7, 2 * h, cout, 1),
            ],
            pools: [5, 9, 13],
        }
    }

    pub fn cout(&self) -> usize {
        self.cv[6].cout()
    }
}

impl Module for Sppcspc {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for c in &self.cv {
            c.param_specs(out);
        }
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut x1 = self.cv[0].forward(cx, x)?;
        x1 = self.cv[2].forward(cx, x1)?;
        x1 = self.cv[3].forward(cx, x1)?;
        let mut parts = vec![x1];
        for &k in &self.pools {
            parts.push(cx.tape.pool2d(x1, PoolKind::Max, k, 1, k / 2)?);
        }
        let cat = cx.tape.concat(&parts)?;
        let y1 = self.cv[4].forward(cx, cat)?;
        let y1 = self.cv[5].forward(cx, y1)?;
        let y2 = self.cv[1].forward(cx, x)?;
        let cat = cx.tape.concat(&[y1, y2])?;
        self.cv[6].forward(cx, cat)
    }
}

/// YOLOv7 MP block: `[1×1 → 3×3/2, maxpool/2 → 1×1]`, each branch `c` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct MpConv {
    pub pool_proj: Cbs,
    pub proj: Cbs,
    pub down: Cbs,
}

impl MpConv {
    pub fn new(name: &str, cin: usize, c: usize) -> Self {
        MpConv {
            pool_proj: Cbs::cbs(&format!("{name}.cv1"), cin, c, 1, 1),
            proj: Cbs::cbs(&format!("{name}.cv2"), cin, c, 1, 1),
            down: Cbs::cbs(&format!("{name}.cv3"), c, c, 3, 2),
        }
    }

    pub fn cout(&self) -> usize {
        self.pool_proj.cout() + self.down.cout()
    }
}

impl Module for MpConv {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.pool_proj.param_specs(out);
        self.proj.param_specs(out);
        self.down.param_specs(out);
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let p = cx.tape.pool2d(x, PoolKind::Max, 2, 2, 0)?;
        let b1 = self.pool_proj.forward(cx, p)?;
        let b2 = self.proj.forward(cx, x)?;
        let b2 = self.down.forward(cx, b2)?;
        cx.tape.concat(&[b2, b1])
    }
}

/// MP block with the max-pool branch replaced by a stride-2 CBS.
#[derive(Clone, Debug, PartialEq)]
pub struct CbsConcat {
    pub strided: Cbs,
    pub proj: Cbs,
    pub down: Cbs,
}

impl CbsConcat {
    pub fn new(name: &str, cin: usize, c: usize) -> Self {
        CbsConcat {
            strided: Cbs::cbs(&format!("{name}.cv1"), cin, c, 3, 2),
            proj: Cbs::cbs(&format!("{name}.cv2"), cin, c, 1, 1),
            down: Cbs::cbs(&format!("{name}.cv3"), c, c, 3, 2),
        }
    }

    pub fn cout(&self) -> usize {
        self.strided.cout() + self.down.cout()
    }
}

impl Module for CbsConcat {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.strided.param_specs(out);
        self.proj.param_specs(out);
        self.down.param_specs(out);
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let b1 = self.strided.forward(cx, x)?;
        let b2 = self.proj.forward(cx, x)?;
        let b2 = self.down.forward(cx, b2)?;
        cx.tape.concat(&[b2, b1])
    }
}

/// 3×3+BN and 1×1+BN branches summed, then SiLU. After [`RepConv::fuse`]
/// the block is a single biased 3×3 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct RepConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// RepVGG identity branch (BN of the input). Never used by the detector;
    /// kept so that fusing it can be rejected explicitly.
    pub identity: bool,
    pub fused: bool,
}

impl RepConv {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        RepConv { name: name.to_string(), cin, cout, stride: 1, identity: false, fused: false }
    }

    fn dense(&self) -> (Conv2d, BatchNorm2d) {
        (
            Conv2d::new(format!("{}.dense.conv", self.name), self.cin, self.cout, 3, self.stride, false),
            BatchNorm2d { name: format!("{}.dense.bn", self.name), c: self.cout },
        )
    }

    fn pointwise(&self) -> (Conv2d, BatchNorm2d) {
        let mut conv = Conv2d::new(format!("{}.pw.conv", self.name), self.cin, self.cout, 1, self.stride, false);
        conv.pad = 0;
        (conv, BatchNorm2d { name: format!("{}.pw.bn", self.name), c: self.cout })
    }

    fn identity_bn(&self) -> BatchNorm2d {
        BatchNorm2d { name: format!("{}.id", self.name), c: self.cin }
    }

    pub fn fused_conv(&self) -> Conv2d {
        Conv2d::new(format!("{}.fused", self.name), self.cin, self.cout, 3, self.stride, true)
    }

    /// Folds both branches into one 3×3 kernel and bias.
    pub fn fuse<T: Float>(&self, store: &ParamStore<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.identity {
            return Err(Error::Contract(format!(
                "{}: cannot fuse a RepConv with an identity branch",
                self.name
            )));
        }
        if self.fused {
            return Err(Error::Contract(format!("{}: already fused", self.name)));
        }
        let (dc, dbn) = self.dense();
        let (pc, pbn) = self.pointwise();
        let (mut w, mut b) = fold_bn(store.tensor(&dc.weight_name())?, store, &dbn.name)?;
        let (w1, b1) = fold_bn(store.tensor(&pc.weight_name())?, store, &pbn.name)?;
        let w1 = pad_1x1_to_3x3(&w1);
        for (a, &x) in w.data_mut().iter_mut().zip(w1.data()) {
            *a += x;
        }
        for (a, &x) in b.data_mut().iter_mut().zip(b1.data()) {
            *a += x;
        }
        Ok((w, b))
    }

    /// Rewrites `store` in place: branch parameters are replaced by the fused
    /// kernel and bias. Returns the fused descriptor.
    pub fn fuse_into<T: Float>(&self, store: &mut ParamStore<T>) -> Result<RepConv> {
        let (w, b) = self.fuse(store)?;
        let mut specs = Vec::new();
        self.param_specs(&mut specs);
        for s in specs {
            store.remove(&s.name);
        }
        let fc = self.fused_conv();
        store.insert(&fc.weight_name(), w, Role::ConvWeight)?;
        store.insert(&fc.bias_name(), b, Role::Bias)?;
        Ok(RepConv { fused: true, ..self.clone() })
    }
}

impl Module for RepConv {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        if self.fused {
            self.fused_conv().param_specs(out);
            return;
        }
        let (dc, dbn) = self.dense();
        let (pc, pbn) = self.pointwise();
        dc.param_specs(out);
        dbn.param_specs(out);
        pc.param_specs(out);
        pbn.param_specs(out);
        if self.identity {
            self.identity_bn().param_specs(out);
        }
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        if self.fused {
            let y = self.fused_conv().forward(cx, x)?;
            return Ok(cx.tape.silu(y));
        }
        let (dc, dbn) = self.dense();
        let (pc, pbn) = self.pointwise();
        let y3 = dc.forward(cx, x)?;
        let y3 = dbn.forward(cx, y3)?;
        let y1 = pc.forward(cx, x)?;
        let y1 = pbn.forward(cx, y1)?;
        let mut y = cx.tape.add(y3, y1)?;
        if self.identity {
            if self.cin != self.cout || self.stride != 1 {
                return Err(shape_err!("{}: identity branch needs cin == cout and stride 1", self.name));
            }
            let id = self.identity_bn().forward(cx, x)?;
            y = cx.tape.add(y, id)?;
        }
        Ok(cx.tape.silu(y))
    }
}

/// Folds an eval-mode batch norm into the preceding bias-free conv:
/// `w' = w·γ/√(σ²+ε)`, `b' = β − μ·γ/√(σ²+ε)`.
pub fn fold_bn<T: Float>(w: &Tensor<T>, store: &ParamStore<T>, bn: &str) -> Result<(Tensor<T>, Tensor<T>)> {
    let gamma = store.tensor(&format!("{bn}.weight"))?.data();
    let beta = store.tensor(&format!("{bn}.bias"))?.data();
    let mean = store.tensor(&format!("{bn}.running_mean"))?.data();
    let var = store.tensor(&format!("{bn}.running_var"))?.data();
    let cout = w.shape().b();
    if gamma.len() != cout {
        return Err(shape_err!("fold_bn: {bn} has {} channels, conv has {cout}", gamma.len()));
    }
    let per = w.numel() / cout;
    let eps = T::cast_f64(BN_EPS);
    let mut wf = w.clone();
    let mut bias = vec![T::zero(); cout];
    for o in 0..cout {
        let s = gamma[o] / (var[o] + eps).sqrt();
        wf.data_mut()[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= s);
        bias[o] = beta[o] - mean[o] * s;
    }
    Ok((wf, Tensor::new([1, cout, 1, 1], bias)?))
}

/// Places a 1×1 kernel at the centre of an otherwise zero 3×3 kernel.
pub fn pad_1x1_to_3x3<T: Float>(w: &Tensor<T>) -> Tensor<T> {
    let s = w.shape();
    Tensor::from_fn(Shape::new(s.b(), s.c(), 3, 3), |[o, i, y, x]| {
        if y == 1 && x == 1 {
            w.at([o, i, 0, 0])
        } else {
            T::zero()
        }
    })
}

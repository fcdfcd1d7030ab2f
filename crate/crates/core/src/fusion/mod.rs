//! The detector's fusion modules: CNN-Swin Transformer, weighted ELAN,
//! multiscale channel split and the CatConv downsampler.

pub mod attention;
pub mod window;

use crate::blocks::{Cbs, Elan, TapWeighting};
use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, Ctx, Module, ParamSpec};
use crate::tensor::{Float, Var};

pub use attention::{attention, Attention, SwinBlock, SwinConfig, SwinUnit, MASK_FILL};
pub use window::{map_to_tokens, tokens_to_map, window_partition, window_reverse, Layout, Tiling, WindowGrid};

/// Two parallel 1×1 CBS branches, one routed through a window transformer,
/// concatenated and merged by a 1×1 CBS.
#[derive(Clone, Debug, PartialEq)]
pub struct Cst {
    pub branch_a: Cbs,
    pub branch_b: Cbs,
    pub swin: SwinBlock,
    pub merge: Cbs,
}

impl Cst {
    /// Each branch is `cout / 2` wide.
    pub fn new(name: &str, cin: usize, cout: usize, swin: SwinConfig) -> Self {
        let half = (cout / 2).max(1);
        Self::with_branches(name, cin, half, half, cout, swin)
    }

    pub fn with_branches(name: &str, cin: usize, ca: usize, cb: usize, cout: usize, swin: SwinConfig) -> Self {
        Cst {
            branch_a: Cbs::cbs(&format!("{name}.cv1"), cin, ca, 1, 1),
            branch_b: Cbs::cbs(&format!("{name}.cv2"), cin, cb, 1, 1),
            swin: SwinBlock::new(&format!("{name}.swin"), cb, swin),
            merge: Cbs::cbs(&format!("{name}.cv3"), ca + cb, cout, 1, 1),
        }
    }

    pub fn cout(&self) -> usize {
        self.merge.cout()
    }

    /// `(branch A, branch B after the transformer)` before concatenation.
    pub fn branches<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let a = self.branch_a.forward(cx, x)?;
        let b = self.branch_b.forward(cx, x)?;
        let b = self.swin.forward(cx, b)?;
        Ok((a, b))
    }
}

impl Module for Cst {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.branch_a.param_specs(out);
        self.branch_b.param_specs(out);
        self.swin.param_specs(out);
        self.merge.param_specs(out);
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (a, b) = self.branches(cx, x)?;
        let cat = cx.tape.concat(&[a, b])?;
        self.merge.forward(cx, cat)
    }
}

/// `w_i = max(w'_i, 0) / (Σ_j max(w'_j, 0) + ξ)`.
pub fn welan_normalize(raw: &[f64], xi: f64) -> Vec<f64> {
    let r: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    let denom: f64 = r.iter().sum::<f64>() + xi;
    r.iter().map(|&v| v / denom).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WElanVariant {
    /// Every tap weighted.
    #[serde(rename = "1")]
    V1,
    /// Only the stacked 3×3 taps weighted.
    #[serde(rename = "2")]
    V2,
}

impl WElanVariant {
    pub fn weighting(self) -> TapWeighting {
        match self {
            WElanVariant::V1 => TapWeighting::All,
            WElanVariant::V2 => TapWeighting::Deep,
        }
    }
}

/// Weighted ELAN with the backbone tap layout.
pub fn welan_backbone(name: &str, cin: usize, mid: usize, cout: usize, v: WElanVariant) -> Elan {
    Elan::backbone(name, cin, mid, cout).with_weighting(v.weighting())
}

/// Weighted ELAN with the neck tap layout.
pub fn welan_neck(name: &str, cin: usize, mid: usize, deep: usize, cout: usize, v: WElanVariant) -> Elan {
    Elan::neck(name, cin, mid, deep, cout).with_weighting(v.weighting())
}

/// Pyramid sizes of the multiscale channel split.
pub const MCS_LEVELS: [usize; 4] = [1, 2, 3, 6];

/// Multiscale channel split: pyramid average pooling, per-level 1×1
/// projections, upsample and concatenate, sigmoid channel gate, 4-way split
/// and sum, 1×1 back to the input width, residual.
///
/// The concatenated map carries `4 · level_channels` channels (1024 with the
/// default 256).
#[derive(Clone, Debug, PartialEq)]
pub struct Mcs {
    pub name: String,
    pub cin: usize,
    pub level_channels: usize,
    pub levels: [usize; 4],
    pub level_convs: Vec<Conv2d>,
    pub out: Conv2d,
}

impl Mcs {
    pub fn new(name: &str, cin: usize, level_channels: usize) -> Self {
        let level_convs = MCS_LEVELS
            .iter()
            .enumerate()
            .map(|(i, _)| Conv2d::new(format!("{name}.level{i}"), cin, level_channels, 1, 1, true))
            .collect();
        Mcs {
            name: name.to_string(),
            cin,
            level_channels,
            levels: MCS_LEVELS,
            level_convs,
            out: Conv2d::new(format!("{name}.out"), level_channels, cin, 1, 1, true),
        }
    }

    /// The gated concatenated map and the gate itself.
    pub fn gated<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let s = cx.tape.shape(x);
        let largest = *self.levels.iter().max().unwrap_or(&1);
        if s.h() < largest || s.w() < largest {
            return Err(shape_err!("{}: input {s:?} smaller than pyramid level {largest}", self.name));
        }
        let mut ups = Vec::with_capacity(4);
        for (&lvl, conv) in self.levels.iter().zip(&self.level_convs) {
            let p = cx.tape.adaptive_avg_pool(x, lvl, lvl)?;
            let p = conv.forward(cx, p)?;
            ups.push(cx.tape.upsample_nearest(p, s.h(), s.w())?);
        }
        let cat = cx.tape.concat(&ups)?;
        let pooled = cx.tape.adaptive_avg_pool(cat, 1, 1)?;
        let gate = cx.tape.sigmoid(pooled);
        Ok((cx.tape.mul(cat, gate)?, gate))
    }
}

impl Module for Mcs {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for c in &self.level_convs {
            c.param_specs(out);
        }
        self.out.param_specs(out);
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, _) = self.gated(cx, x)?;
        let parts = cx.tape.split(g, 4)?;
        let mut sum = parts[0];
        for &p in &parts[1..] {
            sum = cx.tape.add(sum, p)?;
        }
        let y = self.out.forward(cx, sum)?;
        cx.tape.add(x, y)
    }
}

/// Neck downsampler: `[1×1 → 3×3/2 (c), 3×3/2 (2c)]`, concatenated to `3c`.
#[derive(Clone, Debug, PartialEq)]
pub struct CatConv {
    pub proj: Cbs,
    pub down_a: Cbs,
    pub down_b: Cbs,
}

impl CatConv {
    pub fn new(name: &str, cin: usize, c: usize) -> Self {
        CatConv {
            proj: Cbs::cbs(&format!("{name}.cv1"), cin, c, 1, 1),
            down_a: Cbs::cbs(&format!("{name}.cv2"), c, c, 3, 2),
            down_b: Cbs::cbs(&format!("{name}.cv3"), cin, 2 * c, 3, 2),
        }
    }

    pub fn cout(&self) -> usize {
        self.down_a.cout() + self.down_b.cout()
    }
}

impl Module for CatConv {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.proj.param_specs(out);
        self.down_a.param_specs(out);
        self.down_b.param_specs(out);
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = self.proj.forward(cx, x)?;
        let a = self.down_a.forward(cx, a)?;
        let b = self.down_b.forward(cx, x)?;
        cx.tape.concat(&[a, b])
    }
}

//! Multi-head attention and the two-unit (shifted) window transformer block.

use crate::error::{shape_err, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, Module, ParamSpec, Role};
use crate::tensor::{Float, Tape, Tensor, Var};

use super::window::{partition_tokens, reverse_var, Tiling};

/// Logit offset for token pairs that must not attend to each other.
pub const MASK_FILL: f64 = -100.0;

pub struct Attention {
    pub out: Var,
    /// Softmax weights `(N, heads, T, T)`.
    pub probs: Var,
}

/// `(N, 1, T, d)` → `(N, heads, T, d/heads)`.
fn split_heads<T: Float>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x);
    let (n, t, d) = (s.b(), s.h(), s.w());
    let dh = d / heads;
    let mut idx = Vec::with_capacity(s.numel());
    for b in 0..n {
        for h in 0..heads {
            for i in 0..t {
                for j in 0..dh {
                    idx.push(((b * t + i) * d + h * dh + j) as u32);
                }
            }
        }
    }
    tape.gather(x, idx.into(), [n, heads, t, dh])
}

fn merge_heads<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let (n, heads, t, dh) = (s.b(), s.c(), s.h(), s.w());
    let d = heads * dh;
    let mut idx = Vec::with_capacity(s.numel());
    for b in 0..n {
        for i in 0..t {
            for h in 0..heads {
                for j in 0..dh {
                    idx.push((((b * heads + h) * t + i) * dh + j) as u32);
                }
            }
        }
    }
    tape.gather(x, idx.into(), [n, 1, t, d])
}

/// Scaled dot-product attention per head: `softmax(QKᵀ/√d_h + bias)·V`.
///
/// `q`, `k`, `v` are `(N, 1, T, d)`. `bias` broadcasts against the
/// `(N, heads, T, T)` logits.
pub fn attention<T: Float>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize, bias: &[Var]) -> Result<Attention> {
    let d = tape.shape(q).w();
    if heads == 0 || d % heads != 0 {
        return Err(shape_err!("attention: width {d} not divisible by {heads} heads"));
    }
    if tape.shape(k) != tape.shape(q) || tape.shape(v) != tape.shape(q) {
        return Err(shape_err!("attention: q/k/v shapes differ"));
    }
    let dh = d / heads;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let logits = tape.matmul(qh, kh, false, true)?;
    let mut logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    for &b in bias {
        logits = tape.add(logits, b)?;
    }
    let probs = tape.softmax(logits);
    let ctx = tape.matmul(probs, vh, false, false)?;
    let out = merge_heads(tape, ctx)?;
    Ok(Attention { out, probs })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SwinConfig {
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub rel_pos_bias: bool,
}

impl Default for SwinConfig {
    fn default() -> Self {
        SwinConfig { window: 4, heads: 4, mlp_ratio: 2, rel_pos_bias: false }
    }
}

/// LN → (S)W-MSA → residual → LN → MLP → residual, on `(B, 1, H·W, C)` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SwinUnit {
    pub name: String,
    pub dim: usize,
    pub cfg: SwinConfig,
    pub shifted: bool,
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinUnit {
    pub fn new(name: &str, dim: usize, cfg: SwinConfig, shifted: bool) -> Self {
        let lin = |n: &str, a, b| Linear { name: format!("{name}.{n}"), cin: a, cout: b };
        let hidden = dim * cfg.mlp_ratio;
        SwinUnit {
            name: name.to_string(),
            dim,
            shifted,
            norm1: LayerNorm { name: format!("{name}.norm1"), c: dim },
            q: lin("q", dim, dim),
            k: lin("k", dim, dim),
            v: lin("v", dim, dim),
            proj: lin("proj", dim, dim),
            norm2: LayerNorm { name: format!("{name}.norm2"), c: dim },
            fc1: lin("fc1", dim, hidden),
            fc2: lin("fc2", hidden, dim),
            cfg,
        }
    }

    pub fn shift(&self) -> usize {
        if self.shifted {
            self.cfg.window / 2
        } else {
            0
        }
    }

    fn rpb_name(&self) -> String {
        format!("{}.rel_pos", self.name)
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.param_specs(out);
        self.q.param_specs(out);
        self.k.param_specs(out);
        self.v.param_specs(out);
        self.proj.param_specs(out);
        self.norm2.param_specs(out);
        self.fc1.param_specs(out);
        self.fc2.param_specs(out);
        if self.cfg.rel_pos_bias {
            let side = 2 * self.cfg.window - 1;
            out.push(ParamSpec::new(self.rpb_name(), [1, 1, self.cfg.heads, side * side], Init::Const(0.0), Role::Scale));
        }
    }

    /// Relative-position bias `(1, heads, T, T)` gathered from the table.
    fn rel_pos_bias<T: Float>(&self, cx: &mut Ctx<'_, T>) -> Result<Var> {
        let m = self.cfg.window;
        let side = 2 * m - 1;
        let t = m * m;
        let heads = self.cfg.heads;
        let table = cx.param(&self.rpb_name())?;
        let mut idx = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    let dy = (i / m) as isize - (j / m) as isize + m as isize - 1;
                    let dx = (i % m) as isize - (j % m) as isize + m as isize - 1;
                    idx.push((h * side * side + dy as usize * side + dx as usize) as u32);
                }
            }
        }
        cx.tape.gather(table, idx.into(), [1, heads, t, t])
    }

    /// Runs the unit on tokens of an `h×w` map. Returns the new tokens and
    /// the attention weights.
    pub fn forward_tokens<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var, h: usize, w: usize) -> Result<(Var, Var)> {
        let s = cx.tape.shape(x);
        if s.w() != self.dim {
            return Err(shape_err!("{}: expected {} channels, got {s:?}", self.name, self.dim));
        }
        if self.dim % self.cfg.heads != 0 {
            return Err(shape_err!("{}: {} channels not divisible by {} heads", self.name, self.dim, self.cfg.heads));
        }
        let n1 = self.norm1.forward(cx, x)?;
        let grid = partition_tokens(&mut cx.tape, n1, h, w, self.cfg.window, self.shift())?;
        let win = grid.windows;
        let q = self.q.forward(cx, win)?;
        let k = self.k.forward(cx, win)?;
        let v = self.v.forward(cx, win)?;
        let mut bias = Vec::new();
        if let Some(b) = mask_var(&mut cx.tape, &grid.tiling) {
            bias.push(b?);
        }
        if self.cfg.rel_pos_bias {
            bias.push(self.rel_pos_bias(cx)?);
        }
        let att = attention(&mut cx.tape, q, k, v, self.cfg.heads, &bias)?;
        let o = self.proj.forward(cx, att.out)?;
        let o = reverse_var(&mut cx.tape, o, &grid)?;
        let x = cx.tape.add(x, o)?;
        let n2 = self.norm2.forward(cx, x)?;
        let f = self.fc1.forward(cx, n2)?;
        let f = cx.tape.silu(f);
        let f = self.fc2.forward(cx, f)?;
        Ok((cx.tape.add(x, f)?, att.probs))
    }
}

fn mask_var<T: Float>(tape: &mut Tape<T>, tiling: &Tiling) -> Option<Result<Var>> {
    let (shape, data) = tiling.attention_mask::<T>(MASK_FILL)?;
    Some(Tensor::new(shape, data).map(|t| tape.constant(t)))
}

/// W-MSA unit followed by an SW-MSA unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SwinBlock {
    pub units: [SwinUnit; 2],
}

impl SwinBlock {
    pub fn new(name: &str, dim: usize, cfg: SwinConfig) -> Self {
        SwinBlock {
            units: [
                SwinUnit::new(&format!("{name}.w"), dim, cfg.clone(), false),
                SwinUnit::new(&format!("{name}.sw"), dim, cfg, true),
            ],
        }
    }

    /// Tokens in, tokens out; also returns both units' attention weights.
    pub fn forward_tokens<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var, h: usize, w: usize) -> Result<(Var, [Var; 2])> {
        let (y, p0) = self.units[0].forward_tokens(cx, x, h, w)?;
        let (y, p1) = self.units[1].forward_tokens(cx, y, h, w)?;
        Ok((y, [p0, p1]))
    }
}

impl Module for SwinBlock {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for u in &self.units {
            u.param_specs(out);
        }
    }

    /// Map in, map out.
    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x);
        let t = super::window::map_to_tokens(&mut cx.tape, x)?;
        let (y, _) = self.forward_tokens(cx, t, s.h(), s.w())?;
        super::window::tokens_to_map(&mut cx.tape, y, s.h(), s.w())
    }
}

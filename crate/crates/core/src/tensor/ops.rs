//! Differentiable operations recorded on a [`Tape`].

use std::sync::Arc;

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::tape::GradBuf;
use super::{Float, Shape, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// Sentinel in a gather index meaning "emit zero".
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    Silu,
    Relu,
    LeakyRelu(f64),
    Exp,
    Atan,
    Square,
    Sqrt,
    /// `scale·x + shift`
    Affine { scale: f64, shift: f64 },
}

/// Pointwise non-linearities used by the network blocks.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Silu,
    Sigmoid,
    LeakyRelu(f64),
}

impl From<Activation> for UnaryKind {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Silu => UnaryKind::Silu,
            Activation::Sigmoid => UnaryKind::Sigmoid,
            Activation::LeakyRelu(s) => UnaryKind::LeakyRelu(s),
        }
    }
}

/// Binary ops broadcast the right operand over any axis where it has extent 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

pub struct BatchNormOutput<T> {
    pub y: Var,
    /// Per-channel batch mean (train mode only).
    pub batch_mean: Option<Vec<T>>,
    /// Per-channel unbiased batch variance (train mode only).
    pub batch_var: Option<Vec<T>>,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    Unary { x: Var, kind: UnaryKind },
    Binary { a: Var, b: Var, kind: BinaryKind },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var, k: usize, s: usize, p: usize },
    AdaptiveAvg { x: Var },
    Upsample { x: Var },
    Gather { x: Var, index: Arc<[u32]> },
    Concat { xs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Reshape { x: Var },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    WeightNorm { raw: Var, xi: f64 },
    Sum { x: Var, scale: f64 },
    BceWithLogits { x: Var, target: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            BatchNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Binary { a, b, .. } | MatMul { a, b, .. } => vec![*a, *b],
            Concat { xs } => xs.clone(),
            Unary { x, .. }
            | MaxPool { x, .. }
            | AvgPool { x, .. }
            | AdaptiveAvg { x }
            | Upsample { x }
            | Gather { x, .. }
            | SliceChannels { x, .. }
            | Reshape { x }
            | Softmax { x }
            | Sum { x, .. }
            | BceWithLogits { x, .. } => vec![*x],
            WeightNorm { raw, .. } => vec![*raw],
        }
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary_forward<T: Float>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::LeakyRelu(s) => {
            if x > T::zero() {
                x
            } else {
                x * T::cast_f64(s)
            }
        }
        UnaryKind::Exp => x.exp(),
        UnaryKind::Atan => x.atan(),
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Affine { scale, shift } => x * T::cast_f64(scale) + T::cast_f64(shift),
    }
}

/// Derivative given input `x` and output `y`.
fn unary_derivative<T: Float>(kind: UnaryKind, x: T, y: T) -> T {
    let one = T::one();
    match kind {
        UnaryKind::Sigmoid => y * (one - y),
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (one + x * (one - s))
        }
        UnaryKind::Relu => {
            if x > T::zero() {
                one
            } else {
                T::zero()
            }
        }
        UnaryKind::LeakyRelu(s) => {
            if x > T::zero() {
                one
            } else {
                T::cast_f64(s)
            }
        }
        UnaryKind::Exp => y,
        UnaryKind::Atan => one / (one + x * x),
        UnaryKind::Square => x + x,
        UnaryKind::Sqrt => T::cast_f64(0.5) / y,
        UnaryKind::Affine { scale, .. } => T::cast_f64(scale),
    }
}

/// Strides of `b` when broadcast to `a`, with zero on broadcast axes.
fn broadcast_strides(a: Shape, b: Shape) -> Result<[usize; 4]> {
    let bs = b.strides();
    let mut out = [0; 4];
    for i in 0..4 {
        if b.0[i] == a.0[i] {
            out[i] = bs[i];
        } else if b.0[i] == 1 {
            out[i] = 0;
        } else {
            return Err(shape_err!("cannot broadcast {b:?} onto {a:?}"));
        }
    }
    Ok(out)
}

fn for_each_broadcast(a: Shape, bstr: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let [nb, nc, nh, nw] = a.0;
    let mut i = 0;
    for b in 0..nb {
        for c in 0..nc {
            for h in 0..nh {
                let base = b * bstr[0] + c * bstr[1] + h * bstr[2];
                for w in 0..nw {
                    f(i, base + w * bstr[3]);
                    i += 1;
                }
            }
        }
    }
}

fn binary_forward<T: Float>(kind: BinaryKind, a: T, b: T) -> T {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
        BinaryKind::Max => a.max(b),
        BinaryKind::Min => a.min(b),
    }
}

/// Partial derivatives `(∂/∂a, ∂/∂b)`. Ties in max/min route to `a`.
fn binary_partials<T: Float>(kind: BinaryKind, a: T, b: T) -> (T, T) {
    let (one, zero) = (T::one(), T::zero());
    match kind {
        BinaryKind::Add => (one, one),
        BinaryKind::Sub => (one, -one),
        BinaryKind::Mul => (b, a),
        BinaryKind::Div => (one / b, -a / (b * b)),
        BinaryKind::Max => {
            if a >= b {
                (one, zero)
            } else {
                (zero, one)
            }
        }
        BinaryKind::Min => {
            if a <= b {
                (one, zero)
            } else {
                (zero, one)
            }
        }
    }
}

fn row_stats<T: Float>(row: &[T], eps: T) -> (T, T) {
    let n = T::cast_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Matrix dims of a batched operand: `(rows, cols)` after optional transpose
/// plus the gemm strides to read it that way.
fn mat_view(s: Shape, trans: bool) -> (usize, usize, isize, isize) {
    let (r, c) = (s.h(), s.w());
    if trans {
        (c, r, 1, c as isize)
    } else {
        (r, c, c as isize, 1)
    }
}

impl<T: Float> Tape<T> {
    /// 2-D convolution with weight `(O, Cin, kh, kw)` and optional bias `(1, O, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be >= 1"));
        }
        if xs.c() != ws.c() {
            return Err(shape_err!("conv2d: input has {} channels, weight expects {}", xs.c(), ws.c()));
        }
        let (hp, wp) = (xs.h() + 2 * pad, xs.w() + 2 * pad);
        if hp < ws.h() || wp < ws.w() {
            return Err(shape_err!("conv2d: kernel {ws:?} larger than padded input {xs:?}"));
        }
        let geom = ConvGeom {
            cin: xs.c(),
            h: xs.h(),
            w: xs.w(),
            cout: ws.b(),
            kh: ws.h(),
            kw: ws.w(),
            stride,
            pad,
            oh: (hp - ws.h()) / stride + 1,
            ow: (wp - ws.w()) / stride + 1,
        };
        if let Some(b) = b {
            if self.shape(b).numel() != geom.cout {
                return Err(shape_err!("conv2d: bias needs {} elements", geom.cout));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x).data(), xs.b(), self.value(w).data(), bias, &geom);
        let shape = Shape::new(xs.b(), geom.cout, geom.oh, geom.ow);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }))
    }

    /// Batch normalisation over `(B, H, W)` per channel. In train mode the
    /// batch moments are used and returned so the caller can update running
    /// statistics; in eval mode `running` supplies them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[T], &[T])>,
    ) -> Result<BatchNormOutput<T>> {
        let s = self.shape(x);
        let c = s.c();
        if self.shape(gamma).numel() != c || self.shape(beta).numel() != c {
            return Err(shape_err!("batch_norm: affine parameters must have {c} elements"));
        }
        let eps_t = T::cast_f64(eps);
        let plane = s.plane();
        let xv = self.value(x).data();
        let (mean, inv_std, batch_var, train) = match running {
            None => {
                let count = (s.b() * plane) as f64;
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for b in 0..s.b() {
                        let off = (b * c + ch) * plane;
                        acc += xv[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = acc / count;
                    let mut sq = 0.0f64;
                    for b in 0..s.b() {
                        let off = (b * c + ch) * plane;
                        sq += xv[off..off + plane].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                    }
                    mean[ch] = T::cast_f64(m);
                    var[ch] = T::cast_f64(sq / count);
                }
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let unbiased = var.iter().map(|&v| v * T::cast_f64(unbias)).collect();
                (mean, inv, Some(unbiased), true)
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err!("batch_norm: running stats must have {c} elements"));
                }
                let inv = rv.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
                (rm.to_vec(), inv, None, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); s.numel()];
        out.par_chunks_mut(plane).zip(xv.par_chunks(plane)).enumerate().for_each(|(i, (o, xi))| {
            let ch = i % c;
            let scale = g[ch] * inv_std[ch];
            let shift = bt[ch] - mean[ch] * scale;
            for (ov, &v) in o.iter_mut().zip(xi) {
                *ov = v * scale + shift;
            }
        });
        let batch_mean = train.then(|| mean.clone());
        let y = self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train },
        );
        Ok(BatchNormOutput { y, batch_mean, batch_var })
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let v = self.value(x);
        let mut data = v.data().to_vec();
        data.par_iter_mut().with_min_len(4096).for_each(|e| *e = unary_forward(kind, *e));
        let shape = v.shape();
        self.push(Tensor::from_parts(shape, data), Op::Unary { x, kind })
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        self.unary(x, act.into())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, UnaryKind::Affine { scale, shift })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| binary_forward(kind, x, y)).collect()
        } else {
            let bstr = broadcast_strides(sa, sb)?;
            let mut out = vec![T::zero(); sa.numel()];
            for_each_broadcast(sa, bstr, |i, j| out[i] = binary_forward(kind, av[i], bv[j]));
            out
        };
        Ok(self.push(Tensor::from_parts(sa, data), Op::Binary { a, b, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Max)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Min)
    }

    /// Windowed pooling with a square `kernel`.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x);
        if kernel == 0 || stride == 0 {
            return Err(shape_err!("pool2d: kernel and stride must be >= 1"));
        }
        let (hp, wp) = (s.h() + 2 * pad, s.w() + 2 * pad);
        if hp < kernel || wp < kernel {
            return Err(shape_err!("pool2d: kernel {kernel} exceeds padded input {s:?}"));
        }
        let (oh, ow) = ((hp - kernel) / stride + 1, (wp - kernel) / stride + 1);
        let shape = Shape::new(s.b(), s.c(), oh, ow);
        let xv = self.value(x).data();
        Ok(match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::max_pool(xv, s, kernel, stride, pad, oh, ow);
                self.push(Tensor::from_parts(shape, out), Op::MaxPool { x, argmax })
            }
            PoolKind::Avg => {
                let out = kernels::avg_pool(xv, s, kernel, stride, pad, oh, ow);
                self.push(Tensor::from_parts(shape, out), Op::AvgPool { x, k: kernel, s: stride, p: pad })
            }
        })
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if out_h == 0 || out_w == 0 || out_h > s.h() || out_w > s.w() {
            return Err(shape_err!("adaptive_avg_pool: target ({out_h}, {out_w}) invalid for {s:?}"));
        }
        let xv = self.value(x).data();
        let shape = Shape::new(s.b(), s.c(), out_h, out_w);
        let mut out = vec![T::zero(); shape.numel()];
        for p in 0..s.b() * s.c() {
            let plane = &xv[p * s.plane()..(p + 1) * s.plane()];
            for i in 0..out_h {
                let (y0, y1) = kernels::adaptive_bin(i, s.h(), out_h);
                for j in 0..out_w {
                    let (x0, x1) = kernels::adaptive_bin(j, s.w(), out_w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[y * s.w() + xx];
                        }
                    }
                    out[p * out_h * out_w + i * out_w + j] = acc / T::cast_f64(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::AdaptiveAvg { x }))
    }

    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if out_h < s.h() || out_w < s.w() {
            return Err(shape_err!("upsample_nearest: cannot shrink {s:?} to ({out_h}, {out_w})"));
        }
        let xv = self.value(x).data();
        let shape = Shape::new(s.b(), s.c(), out_h, out_w);
        let mut out = vec![T::zero(); shape.numel()];
        let cols: Vec<usize> = (0..out_w).map(|j| kernels::nearest_src(j, s.w(), out_w)).collect();
        for p in 0..s.b() * s.c() {
            let plane = &xv[p * s.plane()..(p + 1) * s.plane()];
            for i in 0..out_h {
                let src = kernels::nearest_src(i, s.h(), out_h);
                let row = &mut out[(p * out_h + i) * out_w..(p * out_h + i + 1) * out_w];
                for (o, &cj) in row.iter_mut().zip(&cols) {
                    *o = plane[src * s.w() + cj];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Upsample { x }))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        if shape.numel() != index.len() || !shape.is_valid() {
            return Err(shape_err!("gather: index of {} entries for shape {shape:?}", index.len()));
        }
        let xv = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i as usize >= xv.len()) {
            return Err(shape_err!("gather: index {bad} out of range {}", xv.len()));
        }
        let out = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { xv[i as usize] })
            .collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather { x, index }))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.b() != s0.b() || s.h() != s0.h() || s.w() != s0.w() {
                return Err(shape_err!("concat: {s:?} does not match {s0:?} outside the channel axis"));
            }
            c += s.c();
        }
        let shape = Shape::new(s0.b(), c, s0.h(), s0.w());
        let mut out = Vec::with_capacity(shape.numel());
        for b in 0..s0.b() {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape().c() * s0.plane();
                out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec() }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c() {
            return Err(shape_err!("slice_channels {start}..{} out of range for {s:?}", start + len));
        }
        let per = s.c() * s.plane();
        let mut out = Vec::with_capacity(s.b() * len * s.plane());
        let xv = self.value(x).data();
        for b in 0..s.b() {
            out.extend_from_slice(&xv[b * per + start * s.plane()..b * per + (start + len) * s.plane()]);
        }
        let shape = Shape::new(s.b(), len, s.h(), s.w());
        Ok(self.push(Tensor::from_parts(shape, out), Op::SliceChannels { x, start }))
    }

    /// Splits the channel axis into `parts` equal slices.
    pub fn split(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(x).c();
        if parts == 0 || c % parts != 0 {
            return Err(shape_err!("split: {c} channels not divisible into {parts} parts"));
        }
        let len = c / parts;
        (0..parts).map(|i| self.slice_channels(x, i * len, len)).collect()
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Batched matrix product over the last two axes. `b` may carry batch
    /// extent `(1, 1)` to be shared across all of `a`'s matrices.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shared = sb.b() == 1 && sb.c() == 1;
        if !shared && (sa.b() != sb.b() || sa.c() != sb.c()) {
            return Err(shape_err!("matmul: batch extents {sa:?} and {sb:?} differ"));
        }
        let (m, k, rsa, csa) = mat_view(sa, ta);
        let (k2, n, rsb, csb) = mat_view(sb, tb);
        if k != k2 {
            return Err(shape_err!("matmul: inner dims {k} and {k2} differ ({sa:?} x {sb:?})"));
        }
        let batches = sa.b() * sa.c();
        let shape = Shape::new(sa.b(), sa.c(), m, n);
        let mut out = vec![T::zero(); shape.numel()];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (asz, bsz) = (sa.plane(), sb.plane());
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, o)| {
            let bi = if shared { 0 } else { i };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                (&av[i * asz..(i + 1) * asz], rsa, csa),
                (&bv[bi * bsz..(bi + 1) * bsz], rsb, csb),
                T::zero(),
                (o, n as isize, 1),
            );
        });
        debug_assert_eq!(out.len(), batches * m * n);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, ta, tb }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = t.shape().w();
        let mut out = t.data().to_vec();
        out.par_chunks_mut(w).for_each(|row| {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        });
        let shape = t.shape();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x })
    }

    /// Layer normalisation over the last axis with `(1, 1, 1, W)` affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let w = s.w();
        if self.shape(gamma).numel() != w || self.shape(beta).numel() != w {
            return Err(shape_err!("layer_norm: affine parameters must have {w} elements"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let eps = T::cast_f64(eps);
        let rows = s.numel() / w;
        let mut mean = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); s.numel()];
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let (m, inv) = row_stats(row, eps);
            mean[r] = m;
            inv_std[r] = inv;
            for j in 0..w {
                out[r * w + j] = (row[j] - m) * inv * g[j] + bt[j];
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::LayerNorm { x, gamma, beta, mean, inv_std }))
    }

    /// Fast normalised fusion weights: `r = max(raw, 0)`, `w = r / (Σr + ξ)`.
    pub fn weight_norm(&mut self, raw: Var, xi: f64) -> Result<Var> {
        if xi.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(crate::Error::Contract(format!("weight_norm: xi must be > 0, got {xi}")));
        }
        let t = self.value(raw);
        let r: Vec<T> = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let denom = r.iter().copied().sum::<T>() + T::cast_f64(xi);
        let out = r.iter().map(|&v| v / denom).collect();
        let shape = t.shape();
        Ok(self.push(Tensor::from_parts(shape, out), Op::WeightNorm { raw, xi }))
    }

    /// `scale · Σx` as a `(1, 1, 1, 1)` tensor.
    pub fn sum_scaled(&mut self, x: Var, scale: f64) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::cast_f64(total * scale)), Op::Sum { x, scale })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.sum_scaled(x, 1.0)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.shape(x).numel();
        self.sum_scaled(x, 1.0 / n as f64)
    }

    /// Sum of numerically stable binary cross-entropy terms between logits
    /// and fixed targets.
    pub fn bce_with_logits_sum(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != target.len() {
            return Err(shape_err!("bce: {} logits vs {} targets", xv.len(), target.len()));
        }
        let total: f64 = xv
            .iter()
            .zip(target)
            .map(|(&z, &t)| {
                let (z, t) = (z.as_f64(), t.as_f64());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(T::cast_f64(total)),
            Op::BceWithLogits { x, target: target.to_vec() },
        ))
    }
}

impl<T: Float> Op<T> {
    pub(crate) fn backward(&self, out: &Tensor<T>, gout: &[T], g: &mut GradBuf<'_, T>) {
        match self {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (g.wants(*x), g.wants(*w), b.is_some_and(|b| g.wants(b)));
                let xs = g.value(*x).shape();
                let grads = kernels::conv2d_backward(
                    g.value(*x).data(),
                    xs.b(),
                    g.value(*w).data(),
                    gout,
                    geom,
                    need,
                );
                if let Some(dx) = grads.dx {
                    g.add(*x, &dx);
                }
                if let Some(dw) = grads.dw {
                    g.add(*w, &dw);
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    g.add(*b, &db);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let s = out.shape();
                let (c, plane) = (s.c(), s.plane());
                let xv = g.value(*x).data();
                let gm = g.value(*gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for b in 0..s.b() {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            let xhat = (xv[i] - mean[ch]) * inv_std[ch];
                            dgamma[ch] += gout[i] * xhat;
                            dbeta[ch] += gout[i];
                        }
                    }
                }
                if g.wants(*x) {
                    let n = T::cast_f64((s.b() * plane) as f64);
                    let mut dx = vec![T::zero(); s.numel()];
                    for ch in 0..c {
                        for b in 0..s.b() {
                            let off = (b * c + ch) * plane;
                            for i in off..off + plane {
                                dx[i] = if *train {
                                    let xhat = (xv[i] - mean[ch]) * inv_std[ch];
                                    gm[ch] * inv_std[ch] / n
                                        * (n * gout[i] - dbeta[ch] - xhat * dgamma[ch])
                                } else {
                                    gout[i] * gm[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    g.add(*x, &dx);
                }
                g.add(*gamma, &dgamma);
                g.add(*beta, &dbeta);
            }
            Op::Unary { x, kind } => {
                let xv = g.value(*x).data();
                let dx: Vec<T> = xv
                    .par_iter()
                    .with_min_len(4096)
                    .zip(out.data())
                    .zip(gout)
                    .map(|((&xi, &yi), &go)| go * unary_derivative(*kind, xi, yi))
                    .collect();
                g.add(*x, &dx);
            }
            Op::Binary { a, b, kind } => {
                let (sa, sb) = (g.value(*a).shape(), g.value(*b).shape());
                let av = g.value(*a).data().to_vec();
                let bv = g.value(*b).data().to_vec();
                let mut da = vec![T::zero(); sa.numel()];
                let mut db = vec![T::zero(); sb.numel()];
                if sa == sb {
                    for i in 0..sa.numel() {
                        let (pa, pb) = binary_partials(*kind, av[i], bv[i]);
                        da[i] = gout[i] * pa;
                        db[i] = gout[i] * pb;
                    }
                } else {
                    let bstr = broadcast_strides(sa, sb).expect("validated in forward");
                    for_each_broadcast(sa, bstr, |i, j| {
                        let (pa, pb) = binary_partials(*kind, av[i], bv[j]);
                        da[i] = gout[i] * pa;
                        db[j] += gout[i] * pb;
                    });
                }
                g.add(*a, &da);
                g.add(*b, &db);
            }
            Op::MaxPool { x, argmax } => {
                let xs = g.value(*x).shape();
                let (in_plane, out_plane) = (xs.plane(), out.shape().plane());
                if let Some(dx) = g.slot(*x) {
                    for (i, (&a, &go)) in argmax.iter().zip(gout).enumerate() {
                        dx[(i / out_plane) * in_plane + a as usize] += go;
                    }
                }
            }
            Op::AvgPool { x, k, s, p } => {
                let xs = g.value(*x).shape();
                let os = out.shape();
                if let Some(dx) = g.slot(*x) {
                    kernels::avg_pool_backward(gout, xs, *k, *s, *p, os.h(), os.w(), dx);
                }
            }
            Op::AdaptiveAvg { x } => {
                let xs = g.value(*x).shape();
                let os = out.shape();
                if let Some(dx) = g.slot(*x) {
                    for p in 0..xs.b() * xs.c() {
                        for i in 0..os.h() {
                            let (y0, y1) = kernels::adaptive_bin(i, xs.h(), os.h());
                            for j in 0..os.w() {
                                let (x0, x1) = kernels::adaptive_bin(j, xs.w(), os.w());
                                let go = gout[p * os.plane() + i * os.w() + j]
                                    / T::cast_f64(((y1 - y0) * (x1 - x0)) as f64);
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        dx[p * xs.plane() + y * xs.w() + xx] += go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample { x } => {
                let xs = g.value(*x).shape();
                let os = out.shape();
                if let Some(dx) = g.slot(*x) {
                    for p in 0..xs.b() * xs.c() {
                        for i in 0..os.h() {
                            let sy = kernels::nearest_src(i, xs.h(), os.h());
                            for j in 0..os.w() {
                                let sx = kernels::nearest_src(j, xs.w(), os.w());
                                dx[p * xs.plane() + sy * xs.w() + sx] += gout[p * os.plane() + i * os.w() + j];
                            }
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(dx) = g.slot(*x) {
                    for (&i, &go) in index.iter().zip(gout) {
                        if i != GATHER_ZERO {
                            dx[i as usize] += go;
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let s = out.shape();
                let mut c_off = 0;
                for &v in xs {
                    let vs = g.value(v).shape();
                    if let Some(dv) = g.slot(v) {
                        let per = vs.c() * s.plane();
                        for b in 0..s.b() {
                            let src = b * s.c() * s.plane() + c_off * s.plane();
                            dv[b * per..(b + 1) * per]
                                .iter_mut()
                                .zip(&gout[src..src + per])
                                .for_each(|(d, &go)| *d += go);
                        }
                    }
                    c_off += vs.c();
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = g.value(*x).shape();
                let os = out.shape();
                if let Some(dx) = g.slot(*x) {
                    let per_out = os.c() * os.plane();
                    for b in 0..xs.b() {
                        let dst = b * xs.c() * xs.plane() + start * xs.plane();
                        dx[dst..dst + per_out]
                            .iter_mut()
                            .zip(&gout[b * per_out..(b + 1) * per_out])
                            .for_each(|(d, &go)| *d += go);
                    }
                }
            }
            Op::Reshape { x } => g.add(*x, gout),
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (g.value(*a).shape(), g.value(*b).shape());
                let shared = sb.b() == 1 && sb.c() == 1;
                let (m, k, _, _) = mat_view(sa, *ta);
                let (_, n, _, _) = mat_view(sb, *tb);
                let batches = sa.b() * sa.c();
                let (asz, bsz) = (sa.plane(), sb.plane());
                let av = g.value(*a).data().to_vec();
                let bv = g.value(*b).data().to_vec();
                if g.wants(*a) {
                    // dA_view[M,K] = dC[M,N] · B_viewᵀ[N,K]; store into A's physical layout.
                    let (rsa, csa) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                    let mut da = vec![T::zero(); av.len()];
                    da.par_chunks_mut(asz).enumerate().for_each(|(i, d)| {
                        let bi = if shared { 0 } else { i };
                        let (_, _, rsb, csb) = mat_view(sb, *tb);
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            (&gout[i * m * n..(i + 1) * m * n], n as isize, 1),
                            (&bv[bi * bsz..(bi + 1) * bsz], csb, rsb),
                            T::zero(),
                            (d, rsa, csa),
                        );
                    });
                    g.add(*a, &da);
                }
                if g.wants(*b) {
                    // dB_view[K,N] = A_viewᵀ[K,M] · dC[M,N]
                    let (rsb, csb) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                    let (_, _, rsa, csa) = mat_view(sa, *ta);
                    let mut db = vec![T::zero(); bv.len()];
                    if shared {
                        for i in 0..batches {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                (&av[i * asz..(i + 1) * asz], csa, rsa),
                                (&gout[i * m * n..(i + 1) * m * n], n as isize, 1),
                                T::one(),
                                (&mut db, rsb, csb),
                            );
                        }
                    } else {
                        db.par_chunks_mut(bsz).enumerate().for_each(|(i, d)| {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                (&av[i * asz..(i + 1) * asz], csa, rsa),
                                (&gout[i * m * n..(i + 1) * m * n], n as isize, 1),
                                T::zero(),
                                (d, rsb, csb),
                            );
                        });
                    }
                    g.add(*b, &db);
                }
            }
            Op::Softmax { x } => {
                let w = out.shape().w();
                let mut dx = vec![T::zero(); gout.len()];
                dx.par_chunks_mut(w)
                    .zip(out.data().par_chunks(w))
                    .zip(gout.par_chunks(w))
                    .for_each(|((d, y), go)| {
                        let dot: T = y.iter().zip(go).map(|(&a, &b)| a * b).sum();
                        for j in 0..w {
                            d[j] = y[j] * (go[j] - dot);
                        }
                    });
                g.add(*x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let w = out.shape().w();
                let xv = g.value(*x).data().to_vec();
                let gm = g.value(*gamma).data().to_vec();
                let rows = xv.len() / w;
                let mut dgamma = vec![T::zero(); w];
                let mut dbeta = vec![T::zero(); w];
                let mut dx = vec![T::zero(); xv.len()];
                let n = T::cast_f64(w as f64);
                for r in 0..rows {
                    let (m, inv) = (mean[r], inv_std[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..w {
                        let i = r * w + j;
                        let xhat = (xv[i] - m) * inv;
                        dgamma[j] += gout[i] * xhat;
                        dbeta[j] += gout[i];
                        let dxhat = gout[i] * gm[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..w {
                        let i = r * w + j;
                        let xhat = (xv[i] - m) * inv;
                        let dxhat = gout[i] * gm[j];
                        dx[i] = inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                g.add(*x, &dx);
                g.add(*gamma, &dgamma);
                g.add(*beta, &dbeta);
            }
            Op::WeightNorm { raw, xi } => {
                let rv = g.value(*raw).data();
                let r: Vec<T> = rv.iter().map(|&v| v.max(T::zero())).collect();
                let denom = r.iter().copied().sum::<T>() + T::cast_f64(*xi);
                // ∂w_i/∂r_j = δ_ij/D − r_i/D²
                let weighted: T = gout.iter().zip(&r).map(|(&go, &ri)| go * ri).sum();
                let dr: Vec<T> = rv
                    .iter()
                    .zip(gout)
                    .map(|(&v, &go)| {
                        if v > T::zero() {
                            go / denom - weighted / (denom * denom)
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                g.add(*raw, &dr);
            }
            Op::Sum { x, scale } => {
                let n = g.value(*x).numel();
                let v = gout[0] * T::cast_f64(*scale);
                g.add(*x, &vec![v; n]);
            }
            Op::BceWithLogits { x, target } => {
                let xv = g.value(*x).data();
                let dx: Vec<T> = xv.iter().zip(target).map(|(&z, &t)| gout[0] * (sigmoid(z) - t)).collect();
                g.add(*x, &dx);
            }
        }
    }
}

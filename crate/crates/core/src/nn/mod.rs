//! Parameter storage, the forward context, and primitive layers.

mod params;

use std::collections::HashMap;

pub use params::{count_trainable, Init, Param, ParamSpec, ParamStore, Role};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Activation, Float, Shape, Tape, Tensor, Var};

/// Running-statistic momentum for batch normalisation.
pub const BN_MOMENTUM: f64 = 0.03;
/// Variance floor for batch normalisation.
pub const BN_EPS: f64 = 1e-3;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients tracked for trainable parameters.
    Train,
    /// Running statistics, no parameter gradients.
    Eval,
}

/// Batch moments observed by one batch-norm layer during a train-mode pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Everything a block needs during one forward pass: the tape, read access
/// to parameters, and the collected batch-norm statistics.
pub struct Ctx<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: HashMap<String, Var>,
    mode: Mode,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Float> Ctx<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Ctx { tape: Tape::new(), params, bound: HashMap::new(), mode, bn_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.tape.leaf(t, requires_grad)
    }

    /// Binds a stored tensor to the tape (once per pass).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let grad = self.mode == Mode::Train && p.role.trainable();
        let v = self.tape.leaf(p.value.clone(), grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound during this pass, in binding order.
    pub fn bound_params(&self) -> Vec<(String, Var)> {
        let mut v: Vec<_> = self.bound.iter().map(|(k, &v)| (k.clone(), v)).collect();
        v.sort_by_key(|(_, var)| *var);
        v
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Batch norm with parameters `{prefix}.weight`, `{prefix}.bias` and
    /// running statistics `{prefix}.running_mean`, `{prefix}.running_var`.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        match self.mode {
            Mode::Train => {
                let out = self.tape.batch_norm(x, gamma, beta, BN_EPS, None)?;
                if let (Some(mean), Some(var)) = (out.batch_mean, out.batch_var) {
                    self.bn_updates.push(BnUpdate { prefix: prefix.to_string(), mean, var });
                }
                Ok(out.y)
            }
            Mode::Eval => {
                let params = self.params;
                let rm = params.tensor(&format!("{prefix}.running_mean"))?;
                let rv = params.tensor(&format!("{prefix}.running_var"))?;
                Ok(self.tape.batch_norm(x, gamma, beta, BN_EPS, Some((rm.data(), rv.data())))?.y)
            }
        }
    }
}

/// Folds collected batch moments into the running statistics:
/// `running ← (1 − m)·running + m·batch`.
pub fn apply_bn_updates<T: Float>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) -> Result<()> {
    let m = T::cast_f64(momentum);
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let t = store.tensor_mut(&format!("{}.{suffix}", u.prefix))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
    Ok(())
}

/// Anything that declares parameters and maps one tensor to another.
pub trait Module {
    fn param_specs(&self, out: &mut Vec<ParamSpec>);
    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var>;

    fn specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        self.param_specs(&mut v);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        Conv2d { name: name.into(), cin, cout, k, stride, pad: k / 2, bias }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

impl Module for Conv2d {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let fan_in = self.cin * self.k * self.k;
        out.push(ParamSpec::new(
            self.weight_name(),
            [self.cout, self.cin, self.k, self.k],
            Init::FanIn(fan_in),
            Role::ConvWeight,
        ));
        if self.bias {
            out.push(ParamSpec::new(self.bias_name(), [1, self.cout, 1, 1], Init::FanIn(fan_in), Role::Bias));
        }
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight_name())?;
        let b = if self.bias { Some(cx.param(&self.bias_name())?) } else { None };
        cx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub c: usize,
}

impl Module for BatchNorm2d {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let s = [1, self.c, 1, 1];
        out.push(ParamSpec::new(format!("{}.weight", self.name), s, Init::Const(1.0), Role::Norm));
        out.push(ParamSpec::new(format!("{}.bias", self.name), s, Init::Const(0.0), Role::Norm));
        out.push(ParamSpec::new(format!("{}.running_mean", self.name), s, Init::Const(0.0), Role::Buffer));
        out.push(ParamSpec::new(format!("{}.running_var", self.name), s, Init::Const(1.0), Role::Buffer));
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.batch_norm(&self.name, x)
    }
}

/// Dense layer over the last axis of `(N, 1, T, C)` token tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl Module for Linear {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(
            format!("{}.weight", self.name),
            [1, 1, self.cin, self.cout],
            Init::FanIn(self.cin),
            Role::LinearWeight,
        ));
        out.push(ParamSpec::new(
            format!("{}.bias", self.name),
            [1, 1, 1, self.cout],
            Init::FanIn(self.cin),
            Role::Bias,
        ));
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x);
        if s.w() != self.cin {
            return Err(shape_err!("{}: expected last axis {}, got {s:?}", self.name, self.cin));
        }
        let w = cx.param(&format!("{}.weight", self.name))?;
        let b = cx.param(&format!("{}.bias", self.name))?;
        let rows = s.numel() / s.w();
        let flat = cx.tape.reshape(x, [1, 1, rows, self.cin])?;
        let y = cx.tape.matmul(flat, w, false, false)?;
        let y = cx.tape.add(y, b)?;
        cx.tape.reshape(y, Shape::new(s.b(), s.c(), s.h(), self.cout))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub c: usize,
}

impl Module for LayerNorm {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let s = [1, 1, 1, self.c];
        out.push(ParamSpec::new(format!("{}.weight", self.name), s, Init::Const(1.0), Role::Norm));
        out.push(ParamSpec::new(format!("{}.bias", self.name), s, Init::Const(0.0), Role::Norm));
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = cx.param(&format!("{}.weight", self.name))?;
        let b = cx.param(&format!("{}.bias", self.name))?;
        cx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Convolution → batch norm → activation (SiLU in every YOLOv7 block).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Activation>,
}

impl ConvBnAct {
    /// CBS with `k/2` padding, so stride 1 preserves the spatial size.
    pub fn cbs(name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvBnAct {
            conv: Conv2d::new(format!("{name}.conv"), cin, cout, k, stride, false),
            bn: BatchNorm2d { name: format!("{name}.bn"), c: cout },
            act: Some(Activation::Silu),
        }
    }

    pub fn cout(&self) -> usize {
        self.conv.cout
    }
}

impl Module for ConvBnAct {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.param_specs(out);
        self.bn.param_specs(out);
    }

    fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(match self.act {
            Some(a) => cx.tape.activation(y, a),
            None => y,
        })
    }
}

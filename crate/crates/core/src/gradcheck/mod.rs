//! Central finite-difference checks of tape gradients in `f64`.

mod suite;

pub use suite::{run_suite, toy_loss_config, toy_targets, SuiteCase, LOSS_TOL, OP_TOL};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub h: f64,
    /// Seed of the projection tensor and of coordinate sampling.
    pub seed: u64,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-3, seed: 0, max_coords: Some(24) }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Tensor and flat index of the largest error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Checks gradients of `f` with respect to every input and every trainable
/// parameter it binds. Non-scalar outputs are reduced to `Σ R ⊙ y` with a
/// fixed random `R`.
///
/// Runs in train mode, so batch-norm layers use batch moments and the checked
/// function is the same one that training differentiates.
pub fn check_gradients<F>(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut proj: Option<Tensor<f64>> = None;
    let (cx, vars, root) = eval(store, inputs, &mut proj, true, &f, opts.seed)?;
    let grads = cx.tape.backward(root)?;
    let mut targets: Vec<(String, Tensor<f64>)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        targets.push((format!("input{i}"), grads.get(*v)));
    }
    for (pname, v) in cx.bound_params() {
        if cx.tape.requires_grad(v) {
            targets.push((pname, grads.get(v)));
        }
    }
    drop(cx);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        coords: 0,
    };
    let scalar = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], proj: &mut Option<Tensor<f64>>| -> Result<f64> {
        let (cx, _, root) = eval(store, inputs, proj, false, &f, opts.seed)?;
        Ok(cx.tape.value(root).data()[0])
    };
    let mut work = store.clone();
    for (tname, analytic) in &targets {
        let n = analytic.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let numeric = if let Some(i) = tname.strip_prefix("input").and_then(|s| s.parse::<usize>().ok()) {
                let mut xs = inputs.to_vec();
                let orig = xs[i].data()[idx];
                xs[i].data_mut()[idx] = orig + opts.h;
                let fp = scalar(store, &xs, &mut proj)?;
                xs[i].data_mut()[idx] = orig - opts.h;
                let fm = scalar(store, &xs, &mut proj)?;
                (fp - fm) / (2.0 * opts.h)
            } else {
                let orig = work.tensor(tname)?.data()[idx];
                work.tensor_mut(tname)?.data_mut()[idx] = orig + opts.h;
                let fp = scalar(&work, inputs, &mut proj)?;
                work.tensor_mut(tname)?.data_mut()[idx] = orig - opts.h;
                let fm = scalar(&work, inputs, &mut proj)?;
                work.tensor_mut(tname)?.data_mut()[idx] = orig;
                (fp - fm) / (2.0 * opts.h)
            };
            let a = analytic.data()[idx];
            let e = rel_err(a, numeric);
            report.coords += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = e;
                report.worst = format!("{tname}[{idx}]");
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

type Forward<'s> = (Ctx<'s, f64>, Vec<Var>, Var);

fn eval<'s, F>(
    store: &'s ParamStore<f64>,
    inputs: &[Tensor<f64>],
    proj: &mut Option<Tensor<f64>>,
    grad: bool,
    f: &F,
    seed: u64,
) -> Result<Forward<'s>>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut cx = Ctx::new(store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| cx.input(t.clone(), grad)).collect();
    let y = f(&mut cx, &vars)?;
    let shape = cx.tape.shape(y);
    let root = if shape.numel() == 1 {
        y
    } else {
        let r = proj.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            Tensor::uniform(shape, -1.0, 1.0, &mut rng)
        });
        let r = cx.tape.constant(r.clone());
        let p = cx.tape.mul(y, r)?;
        cx.tape.sum(p)
    };
    Ok((cx, vars, root))
}

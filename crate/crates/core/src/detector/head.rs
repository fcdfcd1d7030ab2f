use crate::error::Result;
use crate::nn::{Conv2d, Ctx, Init, Module, ParamSpec, ParamStore, Role};
use crate::tensor::{Float, Var};

use super::config::{NetworkConfig, STRIDES};

pub const NUM_ANCHORS: usize = 3;

/// Per scale: implicit add on the input, biased 1×1 conv, implicit multiply
/// on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct IDetect {
    pub name: String,
    pub num_classes: usize,
    pub input_size: usize,
    pub convs: [Conv2d; 3],
}

impl IDetect {
    pub fn new(name: &str, cins: [usize; 3], cfg: &NetworkConfig) -> Self {
        let no = NUM_ANCHORS * cfg.outputs_per_anchor();
        let convs = [0, 1, 2].map(|i| Conv2d::new(format!("{name}.m{i}"), cins[i], no, 1, 1, true));
        IDetect { name: name.to_string(), num_classes: cfg.num_classes, input_size: cfg.input_size, convs }
    }

    pub fn outputs(&self) -> usize {
        NUM_ANCHORS * (5 + self.num_classes)
    }

    fn ia(&self, i: usize) -> String {
        format!("{}.ia{i}", self.name)
    }

    fn im(&self, i: usize) -> String {
        format!("{}.im{i}", self.name)
    }

    pub fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for (i, conv) in self.convs.iter().enumerate() {
            out.push(ParamSpec::new(self.ia(i), [1, conv.cin, 1, 1], Init::Const(0.0), Role::Scale));
            conv.param_specs(out);
            out.push(ParamSpec::new(self.im(i), [1, conv.cout, 1, 1], Init::Const(1.0), Role::Scale));
        }
    }

    /// YOLO prior on the output biases: objectness starts near 8 objects per
    /// image, classes near uniform.
    pub fn init_biases<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let no = 5 + self.num_classes;
        for (i, conv) in self.convs.iter().enumerate() {
            let cells = (self.input_size as f64 / STRIDES[i] as f64).powi(2);
            let obj = (8.0 / cells).ln();
            let cls = (0.6 / (self.num_classes as f64 - 0.99)).ln();
            let b = store.tensor_mut(&conv.bias_name())?;
            for a in 0..NUM_ANCHORS {
                let row = &mut b.data_mut()[a * no..(a + 1) * no];
                row[4] += T::cast_f64(obj);
                for v in &mut row[5..] {
                    *v += T::cast_f64(cls);
                }
            }
        }
        Ok(())
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, xs: [Var; 3]) -> Result<[Var; 3]> {
        let mut out = xs;
        for (i, conv) in self.convs.iter().enumerate() {
            let ia = cx.param(&self.ia(i))?;
            let im = cx.param(&self.im(i))?;
            let y = cx.tape.add(xs[i], ia)?;
            let y = conv.forward(cx, y)?;
            out[i] = cx.tape.mul(y, im)?;
        }
        Ok(out)
    }
}

//! Declarative network graph and its instantiation.

use serde::{Deserialize, Serialize};

use crate::blocks::{Cbs, CbsConcat, Elan, MpConv, RepConv, Sppcspc, TapWeighting};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{CatConv, Cst, Mcs, WElanVariant};
use crate::nn::{Ctx, Module, ParamSpec};
use crate::tensor::{Float, Var};

use super::config::{Downsample, NetworkConfig};
use super::head::IDetect;

/// One block type with unscaled (width 1.0) channel counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockSpec {
    Cbs { c: usize, k: usize, s: usize },
    Elan { mid: usize, out: usize, welan: Option<WElanVariant> },
    ElanH { mid: usize, deep: usize, out: usize, welan: Option<WElanVariant> },
    Cst { out: usize },
    MpConv { c: usize },
    CbsConcat { c: usize },
    CatConv { c: usize },
    Sppcspc { out: usize },
    Mcs,
    Upsample,
    Concat,
    RepConv { out: usize },
    Detect,
}

/// A graph node; `from` lists producer node indices (`-1` = network input).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub from: Vec<isize>,
    pub block: BlockSpec,
}

struct Builder {
    nodes: Vec<NodeSpec>,
}

impl Builder {
    fn push(&mut self, from: &[isize], block: BlockSpec) -> isize {
        self.nodes.push(NodeSpec { from: from.to_vec(), block });
        self.nodes.len() as isize - 1
    }

    fn last(&self) -> isize {
        self.nodes.len() as isize - 1
    }

    fn down(&mut self, kind: Downsample, from: isize, c: usize) -> isize {
        let block = match kind {
            Downsample::MaxPool => BlockSpec::MpConv { c },
            Downsample::CbsConcat => BlockSpec::CbsConcat { c },
            Downsample::CatConv => BlockSpec::CatConv { c },
        };
        self.push(&[from], block)
    }
}

/// The YOLOv7 graph with the configured module placement.
pub fn default_graph(cfg: &NetworkConfig) -> Vec<NodeSpec> {
    let p = cfg.placement();
    let mut b = Builder { nodes: Vec::new() };
    let cbs = |c, k, s| BlockSpec::Cbs { c, k, s };
    let elan = |mid, out| BlockSpec::Elan { mid, out, welan: p.backbone_welan };
    let elan_h = |mid, deep, out| BlockSpec::ElanH { mid, deep, out, welan: p.neck_welan };

    // backbone
    b.push(&[-1], cbs(32, 3, 1));
    b.push(&[b.last()], cbs(64, 3, 2));
    b.push(&[b.last()], cbs(64, 3, 1));
    b.push(&[b.last()], cbs(128, 3, 2));
    b.push(&[b.last()], elan(64, 256));
    let d = b.down(p.backbone_down, b.last(), 128);
    let p3 = b.push(&[d], elan(128, 512));
    let d = b.down(p.backbone_down, p3, 256);
    let p4 = b.push(&[d], elan(256, 1024));
    let d = b.down(p.backbone_down, p4, 512);
    let p5 = if p.cst_p5 { b.push(&[d], BlockSpec::Cst { out: 1024 }) } else { b.push(&[d], elan(256, 1024)) };

    // top-down
    let spp = b.push(&[p5], BlockSpec::Sppcspc { out: 512 });
    b.push(&[spp], cbs(256, 1, 1));
    let up = b.push(&[b.last()], BlockSpec::Upsample);
    let lat = b.push(&[p4], cbs(256, 1, 1));
    b.push(&[lat, up], BlockSpec::Concat);
    let n4 = b.push(&[b.last()], elan_h(256, 128, 256));
    b.push(&[n4], cbs(128, 1, 1));
    let up = b.push(&[b.last()], BlockSpec::Upsample);
    let src = if p.mcs_p3 { b.push(&[p3], BlockSpec::Mcs) } else { p3 };
    let lat = b.push(&[src], cbs(128, 1, 1));
    b.push(&[lat, up], BlockSpec::Concat);
    let out3 = b.push(&[b.last()], elan_h(128, 64, 128));

    // bottom-up
    let d = b.down(p.neck_down, out3, 128);
    b.push(&[d, n4], BlockSpec::Concat);
    let out4 = b.push(&[b.last()], elan_h(256, 128, 256));
    let d = b.down(p.neck_down, out4, 256);
    b.push(&[d, spp], BlockSpec::Concat);
    let out5 = b.push(&[b.last()], elan_h(512, 256, 512));

    // head
    let r3 = b.push(&[out3], BlockSpec::RepConv { out: 256 });
    let r4 = b.push(&[out4], BlockSpec::RepConv { out: 512 });
    let r5 = b.push(&[out5], BlockSpec::RepConv { out: 1024 });
    b.push(&[r3, r4, r5], BlockSpec::Detect);
    b.nodes
}

/// Instantiated block.
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Cbs(Cbs),
    Elan(Elan),
    Cst(Cst),
    MpConv(MpConv),
    CbsConcat(CbsConcat),
    CatConv(CatConv),
    Sppcspc(Sppcspc),
    Mcs(Mcs),
    Upsample,
    Concat,
    RepConv(RepConv),
    Detect(IDetect),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub from: Vec<usize>,
    pub block: Block,
    pub cout: usize,
    pub stride: usize,
}

/// A built network: ordered nodes whose inputs always precede them.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub nodes: Vec<Node>,
}

/// Node index `-1` denotes the image input.
const INPUT: usize = usize::MAX;

impl Network {
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        Self::from_graph(cfg, &default_graph(cfg))
    }

    pub fn from_graph(cfg: &NetworkConfig, graph: &[NodeSpec]) -> Result<Self> {
        cfg.validate()?;
        let mut nodes: Vec<Node> = Vec::with_capacity(graph.len());
        let mut detect_seen = false;
        for (i, spec) in graph.iter().enumerate() {
            if detect_seen {
                return Err(Error::Config(format!("node {i} follows the detect node")));
            }
            let mut from = Vec::with_capacity(spec.from.len());
            for &f in &spec.from {
                if f == -1 {
                    from.push(INPUT);
                } else if f >= 0 && (f as usize) < i {
                    from.push(f as usize);
                } else {
                    return Err(Error::Config(format!("node {i} references {f}, which does not precede it")));
                }
            }
            if from.is_empty() {
                return Err(Error::Config(format!("node {i} has no inputs")));
            }
            let info = |j: usize| -> (usize, usize) {
                if j == INPUT {
                    (3, 1)
                } else {
                    (nodes[j].cout, nodes[j].stride)
                }
            };
            let (cin, stride) = info(from[0]);
            let name = format!("model.{i}");
            let single = |from: &[usize]| -> Result<()> {
                if from.len() != 1 {
                    return Err(Error::Config(format!("node {i} takes exactly one input")));
                }
                Ok(())
            };
            let ch = |c: usize| cfg.ch(c);
            let weighting = |w: &Option<WElanVariant>| w.map_or(TapWeighting::None, |v| v.weighting());
            let (block, cout, stride) = match &spec.block {
                BlockSpec::Cbs { c, k, s } => {
                    single(&from)?;
                    let b = Cbs::cbs(&name, cin, ch(*c), *k, *s);
                    (Block::Cbs(b), ch(*c), stride * s)
                }
                BlockSpec::Elan { mid, out, welan } => {
                    single(&from)?;
                    let e = Elan::backbone(&name, cin, ch(*mid), ch(*out)).with_weighting(weighting(welan));
                    (Block::Elan(e), ch(*out), stride)
                }
                BlockSpec::ElanH { mid, deep, out, welan } => {
                    single(&from)?;
                    let e = Elan::neck(&name, cin, ch(*mid), ch(*deep), ch(*out)).with_weighting(weighting(welan));
                    (Block::Elan(e), ch(*out), stride)
                }
                BlockSpec::Cst { out } => {
                    single(&from)?;
                    let c = Cst::new(&name, cin, ch(*out), cfg.swin.clone());
                    (Block::Cst(c), ch(*out), stride)
                }
                BlockSpec::MpConv { c } => {
                    single(&from)?;
                    let m = MpConv::new(&name, cin, ch(*c));
                    (Block::MpConv(m), 2 * ch(*c), stride * 2)
                }
                BlockSpec::CbsConcat { c } => {
                    single(&from)?;
                    let m = CbsConcat::new(&name, cin, ch(*c));
                    (Block::CbsConcat(m), 2 * ch(*c), stride * 2)
                }
                BlockSpec::CatConv { c } => {
                    single(&from)?;
                    let m = CatConv::new(&name, cin, ch(*c));
                    (Block::CatConv(m), 3 * ch(*c), stride * 2)
                }
                BlockSpec::Sppcspc { out } => {
                    single(&from)?;
                    (Block::Sppcspc(Sppcspc::new(&name, cin, ch(*out))), ch(*out), stride)
                }
                BlockSpec::Mcs => {
                    single(&from)?;
                    (Block::Mcs(Mcs::new(&name, cin, cfg.mcs_channels)), cin, stride)
                }
                BlockSpec::Upsample => {
                    single(&from)?;
                    if stride < 2 {
                        return Err(Error::Config(format!("node {i} upsamples past the input resolution")));
                    }
                    (Block::Upsample, cin, stride / 2)
                }
                BlockSpec::Concat => {
                    let mut c = 0;
                    for &j in &from {
                        let (cj, sj) = info(j);
                        if sj != stride {
                            return Err(Error::Config(format!("node {i} concatenates strides {stride} and {sj}")));
                        }
                        c += cj;
                    }
                    (Block::Concat, c, stride)
                }
                BlockSpec::RepConv { out } => {
                    single(&from)?;
                    let r = RepConv { fused: cfg.fused, ..RepConv::new(&name, cin, ch(*out)) };
                    (Block::RepConv(r), ch(*out), stride)
                }
                BlockSpec::Detect => {
                    if from.len() != 3 {
                        return Err(Error::Config(format!("detect node {i} needs three inputs")));
                    }
                    let mut cins = [0; 3];
                    for (k, &j) in from.iter().enumerate() {
                        let (cj, sj) = info(j);
                        if sj != super::config::STRIDES[k] {
                            return Err(Error::Config(format!(
                                "detect input {k} has stride {sj}, expected {}",
                                super::config::STRIDES[k]
                            )));
                        }
                        cins[k] = cj;
                    }
                    detect_seen = true;
                    (Block::Detect(IDetect::new(&name, cins, cfg)), 0, 0)
                }
            };
            nodes.push(Node { from, block, cout, stride });
        }
        if !detect_seen {
            return Err(Error::Config("graph has no detect node".into()));
        }
        Ok(Network { cfg: cfg.clone(), nodes })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.block {
                Block::Cbs(b) => b.param_specs(&mut out),
                Block::Elan(b) => b.param_specs(&mut out),
                Block::Cst(b) => b.param_specs(&mut out),
                Block::MpConv(b) => b.param_specs(&mut out),
                Block::CbsConcat(b) => b.param_specs(&mut out),
                Block::CatConv(b) => b.param_specs(&mut out),
                Block::Sppcspc(b) => b.param_specs(&mut out),
                Block::Mcs(b) => b.param_specs(&mut out),
                Block::RepConv(b) => b.param_specs(&mut out),
                Block::Detect(b) => b.param_specs(&mut out),
                Block::Upsample | Block::Concat => {}
            }
        }
        out
    }

    pub fn detect(&self) -> &IDetect {
        match self.nodes.last().map(|n| &n.block) {
            Some(Block::Detect(d)) => d,
            _ => unreachable!("build guarantees a trailing detect node"),
        }
    }

    pub fn repconvs(&self) -> impl Iterator<Item = &RepConv> {
        self.nodes.iter().filter_map(|n| match &n.block {
            Block::RepConv(r) => Some(r),
            _ => None,
        })
    }

    /// Raw head maps `(B, 3·(5+nc), H/s, W/s)` for strides 8, 16, 32.
    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<[Var; 3]> {
        let s = cx.tape.shape(x);
        if s.c() != 3 || s.h() % 32 != 0 || s.w() % 32 != 0 {
            return Err(shape_err!("network input must be (B, 3, 32k, 32k), got {s:?}"));
        }
        let mut outs: Vec<Option<Var>> = Vec::with_capacity(self.nodes.len());
        let get = |outs: &[Option<Var>], j: usize| if j == INPUT { x } else { outs[j].expect("evaluated") };
        for n in &self.nodes {
            let a = get(&outs, n.from[0]);
            let y = match &n.block {
                Block::Cbs(b) => b.forward(cx, a)?,
                Block::Elan(b) => b.forward(cx, a)?,
                Block::Cst(b) => b.forward(cx, a)?,
                Block::MpConv(b) => b.forward(cx, a)?,
                Block::CbsConcat(b) => b.forward(cx, a)?,
                Block::CatConv(b) => b.forward(cx, a)?,
                Block::Sppcspc(b) => b.forward(cx, a)?,
                Block::Mcs(b) => b.forward(cx, a)?,
                Block::RepConv(b) => b.forward(cx, a)?,
                Block::Upsample => {
                    let sa = cx.tape.shape(a);
                    cx.tape.upsample_nearest(a, sa.h() * 2, sa.w() * 2)?
                }
                Block::Concat => {
                    let xs: Vec<Var> = n.from.iter().map(|&j| get(&outs, j)).collect();
                    cx.tape.concat(&xs)?
                }
                Block::Detect(d) => {
                    let xs = [get(&outs, n.from[0]), get(&outs, n.from[1]), get(&outs, n.from[2])];
                    return d.forward(cx, xs);
                }
            };
            outs.push(Some(y));
        }
        unreachable!("build guarantees a trailing detect node")
    }
}

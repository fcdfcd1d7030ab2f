use cst_yolo::blocks::RepConv;
use cst_yolo::boxes::{BBox, Detection};
use cst_yolo::data::{blood_classes, render_scene, Sample};
use cst_yolo::detector::{
    build_targets, compute_loss, decode, decode_box, default_graph, nms, train, train_step, Ablation, Arch, Block,
    BlockSpec, LossConfig, Network, NetworkConfig, NodeSpec, Sgd, Target, TrainConfig, NUM_ANCHORS, STRIDES,
};
use cst_yolo::metrics::GtBox;
use cst_yolo::nn::{Ctx, Mode, Module, ParamStore};
use cst_yolo::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{nms_oracle, perturb_bn};

const ALL_ARCHS: [Arch; 6] = [
    Arch::CstYolo,
    Arch::Yolov7Baseline,
    Arch::Ablation(Ablation::WithoutCst),
    Arch::Ablation(Ablation::WithoutWelan),
    Arch::Ablation(Ablation::WithoutMcs),
    Arch::Ablation(Ablation::WithMaxPool),
];

fn forward_eval<T: cst_yolo::Float>(net: &Network, store: &ParamStore<T>, x: Tensor<T>) -> [Tensor<T>; 3] {
    let mut cx = Ctx::new(store, Mode::Eval);
    let xv = cx.input(x, false);
    let raw = net.forward(&mut cx, xv).unwrap();
    raw.map(|v| cx.tape.value(v).clone())
}

#[test]
fn every_arch_builds_and_emits_three_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for arch in ALL_ARCHS {
        let cfg = NetworkConfig::new(arch, 3, 64, 0.25);
        let net = Network::build(&cfg).unwrap();
        let store = net.init_params::<f32>(0).unwrap();
        let raw = forward_eval(&net, &store, Tensor::uniform([2, 3, 64, 64], 0.0, 1.0, &mut rng));
        for (i, t) in raw.iter().enumerate() {
            let s = t.shape();
            assert_eq!((s.b(), s.c(), s.h(), s.w()), (2, NUM_ANCHORS * 8, 64 / STRIDES[i], 64 / STRIDES[i]), "{arch}");
            assert!(t.data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn head_strides_and_channels_at_640() {
    let cfg = NetworkConfig::new(Arch::CstYolo, 80, 640, 1.0);
    let net = Network::build(&cfg).unwrap();
    let heads: Vec<_> = net.nodes.iter().filter(|n| matches!(n.block, Block::RepConv(_))).collect();
    assert_eq!(heads.iter().map(|n| n.stride).collect::<Vec<_>>(), STRIDES.to_vec());
    assert_eq!(heads.iter().map(|n| n.cout).collect::<Vec<_>>(), vec![256, 512, 1024]);
    assert_eq!(STRIDES.map(|s| 640 / s), [80, 40, 20]);
    assert_eq!(net.detect().outputs(), 255);
}

#[test]
fn parameter_counts_per_arch() {
    let want = [
        (Arch::CstYolo, 47_875_254, 47_181_750),
        (Arch::Yolov7Baseline, 37_622_682, 36_929_178),
        (Arch::Ablation(Ablation::WithoutCst), 45_505_722, 44_812_218),
        (Arch::Ablation(Ablation::WithoutWelan), 47_875_226, 47_181_722),
        (Arch::Ablation(Ablation::WithoutMcs), 47_218_358, 46_524_854),
        (Arch::Ablation(Ablation::WithMaxPool), 40_649_142, 39_955_638),
    ];
    for (arch, train_time, fused) in want {
        let net = Network::build(&NetworkConfig::new(arch, 80, 640, 1.0)).unwrap();
        assert_eq!(net.num_trainable(), train_time, "{arch}");
        let mut cfg = NetworkConfig::new(arch, 80, 640, 1.0);
        cfg.fused = true;
        assert_eq!(Network::build(&cfg).unwrap().num_trainable(), fused, "{arch} fused");
    }
}

#[test]
fn welan_removal_only_drops_fusion_weights() {
    let full = Network::build(&NetworkConfig::new(Arch::CstYolo, 80, 640, 1.0)).unwrap().num_trainable();
    let plain = Network::build(&NetworkConfig::new(Arch::Ablation(Ablation::WithoutWelan), 80, 640, 1.0))
        .unwrap()
        .num_trainable();
    // one raw weight per aggregated tap
    assert_eq!(full - plain, 28);
}

#[test]
fn dangling_reference_is_config_error() {
    let cfg = NetworkConfig::new(Arch::Yolov7Baseline, 3, 64, 0.25);
    let mut g = default_graph(&cfg);
    g[3].from = vec![40];
    assert!(matches!(Network::from_graph(&cfg, &g), Err(Error::Config(_))));
    let mut g = default_graph(&cfg);
    g.pop();
    assert!(matches!(Network::from_graph(&cfg, &g), Err(Error::Config(_))));
    let bad = vec![NodeSpec { from: vec![-1], block: BlockSpec::Detect }];
    assert!(Network::from_graph(&cfg, &bad).is_err());
}

#[test]
fn implicit_vectors_start_as_identity() {
    let net = Network::build(&NetworkConfig::new(Arch::CstYolo, 3, 64, 0.25)).unwrap();
    let store = net.init_params::<f32>(0).unwrap();
    for i in 0..3 {
        assert!(store.tensor(&format!("{}.ia{i}", net.detect().name)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(store.tensor(&format!("{}.im{i}", net.detect().name)).unwrap().data().iter().all(|&v| v == 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn decoded_boxes_stay_within_cell_and_anchor_bounds(
        t in prop::array::uniform4(-30.0f64..30.0), gx in 0usize..80, gy in 0usize..80,
        si in 0usize..3, aw in 1.0f64..400.0, ah in 1.0f64..400.0,
    ) {
        let s = STRIDES[si] as f64;
        let b = decode_box(t, gx, gy, s, [aw, ah]);
        let (cx, cy) = b.center();
        prop_assert!(cx >= (gx as f64 - 0.5) * s - 1e-9 && cx <= (gx as f64 + 1.5) * s + 1e-9);
        prop_assert!(cy >= (gy as f64 - 0.5) * s - 1e-9 && cy <= (gy as f64 + 1.5) * s + 1e-9);
        prop_assert!(b.width() >= 0.0 && b.width() <= 4.0 * aw + 1e-9);
        prop_assert!(b.height() >= 0.0 && b.height() <= 4.0 * ah + 1e-9);
    }
}

#[test]
fn decode_reads_channel_layout() {
    let cfg = NetworkConfig::new(Arch::CstYolo, 2, 64, 0.25);
    let no = 7;
    let mut raw = [8, 4, 2].map(|g| Tensor::<f64>::full([1, 3 * no, g, g], -20.0));
    // anchor 1 at cell (x=3, y=2) of the stride-8 map, class 1
    for (attr, v) in [(0, 0.0), (1, 0.0), (2, 0.0), (3, 0.0), (4, 20.0), (6, 20.0)] {
        let off = raw[0].offset([0, no + attr, 2, 3]);
        raw[0].data_mut()[off] = v;
    }
    let dets = decode(&raw, &cfg, 0.5);
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].len(), 1);
    let d = dets[0][0];
    assert_eq!(d.class, 1);
    let anchor = cfg.scale_anchors(0)[1];
    assert_eq!(d.bbox.center(), (3.5 * 8.0, 2.5 * 8.0));
    assert!((d.bbox.width() - anchor[0]).abs() < 1e-9);
}

#[test]
fn nms_chain_keeps_alternate_boxes() {
    // each box overlaps only its neighbours at IoU 1/3 ≥ 0.3
    let dets: Vec<Detection> = (0..6)
        .map(|i| Detection {
            bbox: BBox::new(i as f64 * 5.0, 0.0, i as f64 * 5.0 + 10.0, 10.0),
            class: 0,
            confidence: 0.9 - i as f64 * 0.1,
        })
        .collect();
    let kept = nms(&dets, 0.3, 0.0);
    let xs: Vec<f64> = kept.iter().map(|d| d.bbox.x1).collect();
    assert_eq!(xs, vec![0.0, 10.0, 20.0]);
    assert_eq!(kept, nms_oracle(&dets, 0.3, 0.0));
}

#[test]
fn nms_matches_brute_force_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for scene in 0..200 {
        let n = rng.random_range(0..=6);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
                let (w, h) = (rng.random_range(4.0..20.0), rng.random_range(4.0..20.0));
                // coarse confidences so that ties occur
                let confidence = rng.random_range(0..5) as f64 / 4.0;
                Detection { bbox: BBox::new(x, y, x + w, y + h), class: rng.random_range(0..2), confidence }
            })
            .collect();
        let iou_t = [0.3, 0.5, 0.65][scene % 3];
        assert_eq!(nms(&dets, iou_t, 0.25), nms_oracle(&dets, iou_t, 0.25), "scene {scene}: {dets:?}");
    }
}

fn toy_cfg() -> NetworkConfig {
    NetworkConfig::new(Arch::CstYolo, 2, 64, 0.25)
}

fn loss_of(raw: &[Tensor<f64>; 3], targets: &[Target]) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let vars = raw.clone().map(|t| tape.leaf(t, true));
    let lo = compute_loss(&mut tape, vars, targets, &toy_cfg(), &LossConfig::default(), None).unwrap();
    let total = tape.value(lo.total).data()[0];
    let b = raw[0].shape().b() as f64;
    assert!((total - b * (lo.box_loss + lo.obj_loss + lo.cls_loss)).abs() <= 1e-9 * total.abs().max(1.0));
    (lo.box_loss, lo.obj_loss, lo.cls_loss)
}

fn arb_target() -> impl Strategy<Value = Target> {
    (0usize..2, 0usize..2, 0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.4, 0.05f64..0.4)
        .prop_map(|(image, class, cx, cy, w, h)| Target { image, class, cx, cy, w, h })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn loss_terms_are_non_negative(targets in prop::collection::vec(arb_target(), 0..4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = [8, 4, 2].map(|g| Tensor::uniform([2, 21, g, g], -3.0, 3.0, &mut rng));
        let (b, o, c) = loss_of(&raw, &targets);
        prop_assert!(b >= 0.0 && o >= 0.0 && c >= 0.0);
        prop_assert!(b.is_finite() && o.is_finite() && c.is_finite());
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn perfect_predictions_saturate_the_loss() {
    let cfg = toy_cfg();
    let targets = [
        Target { image: 0, class: 1, cx: 0.3, cy: 0.6, w: 0.2, h: 0.25 },
        // separate image: on the 2×2 map the neighbour cells would collide
        Target { image: 1, class: 0, cx: 0.71, cy: 0.27, w: 0.12, h: 0.1 },
    ];
    let no = 7;
    let mut raw = [8, 4, 2].map(|g| Tensor::<f64>::full([2, 3 * no, g, g], -25.0));
    for (si, t) in raw.iter_mut().enumerate() {
        let g = t.shape().h();
        let asg = build_targets(&targets, cfg.scale_anchors(si), STRIDES[si] as f64, (g, g), 4.0);
        for a in asg {
            let v = [
                logit((a.tbox[0] + 0.5) / 2.0),
                logit((a.tbox[1] + 0.5) / 2.0),
                logit((a.tbox[2] / a.anchor_wh[0]).sqrt() / 2.0),
                logit((a.tbox[3] / a.anchor_wh[1]).sqrt() / 2.0),
                25.0,
            ];
            for (k, x) in v.iter().enumerate() {
                let off = t.offset([a.image, a.anchor * no + k, a.gj, a.gi]);
                t.data_mut()[off] = *x;
            }
            let off = t.offset([a.image, a.anchor * no + 5 + a.class, a.gj, a.gi]);
            t.data_mut()[off] = 25.0;
        }
    }
    let (b, o, c) = loss_of(&raw, &targets);
    assert!(b + o + c < 1e-3, "box {b} obj {o} cls {c}");
}

#[test]
fn empty_targets_leave_only_objectness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = [8, 4, 2].map(|g| Tensor::uniform([2, 21, g, g], -1.0, 1.0, &mut rng));
    let (b, o, c) = loss_of(&raw, &[]);
    assert_eq!((b, c), (0.0, 0.0));
    assert!(o > 0.0);
}

#[test]
fn out_of_range_target_is_rejected() {
    let raw = [8, 4, 2].map(|g| Tensor::<f64>::zeros([1, 21, g, g]));
    let mut tape = Tape::new();
    let vars = raw.map(|t| tape.leaf(t, true));
    let bad = [Target { image: 1, class: 0, cx: 0.5, cy: 0.5, w: 0.1, h: 0.1 }];
    let r = compute_loss(&mut tape, vars, &bad, &toy_cfg(), &LossConfig::default(), None);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn cosine_schedule_examples() {
    let tc = TrainConfig { lr0: 0.01, lr_min_frac: 0.1, epochs: 10, ..Default::default() };
    assert!((tc.lr_at(0.0) - 0.01).abs() < 1e-15);
    assert!((tc.lr_at(5.0) - 0.0055).abs() < 1e-15);
    assert!((tc.lr_at(10.0) - 0.001).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for e in 0..=10 {
        let lr = tc.lr_at(e as f64);
        assert!(lr < prev);
        prev = lr;
    }
}

fn toy_samples(n: usize, seed: u64) -> Vec<Sample> {
    let classes = blood_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (img, objs) = render_scene(&mut rng, 64, 3);
            let boxes: Vec<GtBox> = objs
                .iter()
                .map(|o| GtBox { class: classes.iter().position(|c| *c == o.name).unwrap(), bbox: o.bbox })
                .collect();
            Sample::from_image(&format!("s{i}"), &img, &boxes, 64)
        })
        .collect()
}

fn small_train_config() -> TrainConfig {
    TrainConfig { lr0: 0.01, weight_decay: 0.0, batch: 2, epochs: 2, seed: 3, ..Default::default() }
}

#[test]
fn one_step_reduces_loss_on_same_batch() {
    let net = Network::build(&NetworkConfig::new(Arch::CstYolo, 3, 64, 0.25)).unwrap();
    let mut store = net.init_params::<f32>(0).unwrap();
    let samples = toy_samples(2, 5);
    let batch: Vec<&Sample> = samples.iter().collect();
    let tc = small_train_config();
    let mut opt = Sgd::new(0.0, 0.0);
    let before = train_step(&net, &mut store, &mut opt, &batch, 0.01, &tc).unwrap().total();
    let after = train_step(&net, &mut store, &mut opt, &batch, 0.0, &tc).unwrap().total();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn training_is_deterministic() {
    let net = Network::build(&NetworkConfig::new(Arch::CstYolo, 3, 64, 0.25)).unwrap();
    let samples = toy_samples(4, 8);
    let classes = blood_classes();
    let run = || {
        let mut store = net.init_params::<f32>(0).unwrap();
        let log = train(&net, &mut store, &samples, &[], &classes, &small_train_config(), |_| {}).unwrap();
        (store, log)
    };
    let (s1, l1) = run();
    let (s2, l2) = run();
    assert_eq!(l1, l2);
    for (name, p) in s1.iter() {
        assert_eq!(p.value.data(), s2.tensor(name).unwrap().data(), "{name}");
    }
}

#[test]
fn repconv_fusion_matches_over_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let cin = rng.random_range(1..6);
        let cout = rng.random_range(1..6);
        let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
        let r = RepConv::new("r", cin, cout);
        let mut store = ParamStore::<f64>::from_specs(&r.specs(), draw).unwrap();
        perturb_bn(&mut store, &mut rng);
        let x = Tensor::uniform([2, cin, h, w], -2.0, 2.0, &mut rng);
        let run = |m: &RepConv, s: &ParamStore<f64>| {
            let mut cx = Ctx::new(s, Mode::Eval);
            let xv = cx.input(x.clone(), false);
            let y = m.forward(&mut cx, xv).unwrap();
            cx.tape.value(y).clone()
        };
        let y0 = run(&r, &store);
        let fused = r.fuse_into(&mut store).unwrap();
        assert_eq!(store.len(), 2);
        worst = worst.max(y0.max_abs_diff(&run(&fused, &store)));
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn fused_network_decodes_the_same_boxes() {
    let cfg = NetworkConfig::new(Arch::CstYolo, 3, 64, 0.25);
    let net = Network::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = net.init_params::<f64>(0).unwrap();
    perturb_bn(&mut store, &mut rng);
    let x = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng);
    let before = decode(&forward_eval(&net, &store, x.clone()), &cfg, 0.0);
    let fused = net.fuse(&mut store).unwrap();
    assert!(fused.cfg.fused);
    assert_eq!(fused.num_trainable(), store.num_trainable());
    let after = decode(&forward_eval(&fused, &store, x), &cfg, 0.0);
    assert_eq!(before[0].len(), after[0].len());
    assert!(!before[0].is_empty());
    let mut worst: f64 = 0.0;
    for (a, b) in before[0].iter().zip(&after[0]) {
        assert_eq!(a.class, b.class);
        for (p, q) in [(a.bbox.x1, b.bbox.x1), (a.bbox.y1, b.bbox.y1), (a.bbox.x2, b.bbox.x2), (a.bbox.y2, b.bbox.y2)] {
            worst = worst.max((p - q).abs());
        }
    }
    assert!(worst < 1e-4, "{worst}");
    assert!(net.fuse(&mut store).is_err(), "second fuse must fail");
}

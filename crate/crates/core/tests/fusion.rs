use cst_yolo::blocks::{Cbs, CbsConcat, Elan, MpConv, RepConv, Sppcspc};
use cst_yolo::fusion::{
    attention, map_to_tokens, welan_backbone, welan_neck, welan_normalize, window_partition, CatConv, Cst, Layout, Mcs,
    SwinBlock, SwinConfig, SwinUnit, WElanVariant,
};
use cst_yolo::gradcheck::{check_gradients, GradCheckOptions};
use cst_yolo::nn::{Ctx, Init, Mode, Module, ParamStore};
use cst_yolo::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn gradcheck<M: Module>(name: &str, m: &M, shape: [usize; 4], h: f64) -> f64 {
    let store = ParamStore::<f64>::from_specs(&m.specs(), 11).unwrap();
    let x = rand_tensor(shape, 5);
    let opts = GradCheckOptions { h, seed: 3, max_coords: Some(12) };
    let r = check_gradients(name, &store, &[x], |cx, xs| m.forward(cx, xs[0]), &opts).unwrap();
    assert!(r.coords > 0);
    if std::env::var("GC_DEBUG").is_ok() {
        eprintln!("{r:?}");
    }
    r.max_rel_err
}

#[test]
fn welan_normalize_examples() {
    let w = welan_normalize(&[1.0; 4], 1e-4);
    for v in &w {
        assert!((v - 0.24999375).abs() < 1e-8);
    }
    assert_eq!(welan_normalize(&[0.0; 4], 1e-4), vec![0.0; 4]);
    let w = welan_normalize(&[2.0, 0.0, 0.0, 0.0], 1e-4);
    assert!((w[0] - 0.99995).abs() < 1e-8);
    assert_eq!(&w[1..], &[0.0, 0.0, 0.0]);
}

#[test]
fn windowed_attention_equals_global_when_window_covers_map() {
    let (c, hw) = (8usize, 4usize);
    let mut cx_store = ParamStore::<f64>::new();
    let mut cx = Ctx::new(&cx_store, Mode::Eval);
    let x = cx.input(rand_tensor([1, c, hw, hw], 1), false);
    let tok = map_to_tokens(&mut cx.tape, x).unwrap();
    let g = window_partition(&mut cx.tape, x, hw, 0, Layout::Map).unwrap();
    let att = attention(&mut cx.tape, g.windows, g.windows, g.windows, 2, &[]).unwrap();
    let got = cx.tape.value(att.out).clone();

    // naive global attention over all 16 tokens
    let t = cx.tape.value(tok).data().to_vec();
    let n = hw * hw;
    let dh = c / 2;
    let mut want = vec![0.0f64; n * c];
    for h in 0..2 {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|d| t[i * c + h * dh + d] * t[j * c + h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                want[i * c + h * dh + d] = (0..n).map(|j| e[j] / z * t[j * c + h * dh + d]).sum();
            }
        }
    }
    let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-6, "diff {diff}");
    cx_store = ParamStore::new();
    drop(cx_store);
}

#[test]
fn attention_rows_are_normalised() {
    let store = ParamStore::<f64>::new();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let q = cx.input(rand_tensor([1, 1, 4, 8], 2), false);
    let k = cx.input(rand_tensor([1, 1, 4, 8], 3), false);
    let v = cx.input(rand_tensor([1, 1, 4, 8], 4), false);
    let a = attention(&mut cx.tape, q, k, v, 2, &[]).unwrap();
    for row in cx.tape.value(a.probs).data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn identical_keys_split_attention_evenly() {
    let store = ParamStore::<f64>::new();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let q = cx.input(Tensor::from_fn([1, 1, 2, 2], |[_, _, i, j]| (i + j) as f64), false);
    let k = cx.input(Tensor::full([1, 1, 2, 2], 0.7), false);
    let a = attention(&mut cx.tape, q, k, k, 1, &[]).unwrap();
    assert!(cx.tape.value(a.probs).data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
    let single = cx.input(rand_tensor([1, 1, 1, 4], 9), false);
    let a = attention(&mut cx.tape, single, single, single, 2, &[]).unwrap();
    assert_eq!(cx.tape.value(a.out).data(), cx.tape.value(single).data());
}

#[test]
fn shifted_window_mask_blocks_wrapped_pairs() {
    let (h, w, m, shift) = (4usize, 4usize, 2usize, 1usize);
    let cfg = SwinConfig { window: m, heads: 2, ..SwinConfig::default() };
    let unit = SwinUnit::new("u", 8, cfg, true);
    let mut specs = Vec::new();
    unit.param_specs(&mut specs);
    let store = ParamStore::<f64>::from_specs(&specs, 2).unwrap();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let x = cx.input(rand_tensor([1, 1, h * w, 8], 6), false);
    let (_, probs) = unit.forward_tokens(&mut cx, x, h, w).unwrap();
    let p = cx.tape.value(probs);
    let t = m * m;
    let nwx = w / m;
    let wrapped = |win: usize, tok: usize| {
        let (py, px) = ((win / nwx) * m + tok / m, (win % nwx) * m + tok % m);
        (py + shift >= h, px + shift >= w)
    };
    let mut checked = 0;
    for win in 0..(h / m) * (w / m) {
        for head in 0..2 {
            for i in 0..t {
                for j in 0..t {
                    if wrapped(win, i) != wrapped(win, j) {
                        let v = p.at([win, head, i, j]);
                        assert!(v <= 1e-8, "window {win} pair ({i},{j}) weight {v}");
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn swin_and_cst_preserve_shape() {
    let cfg = SwinConfig { window: 4, heads: 2, ..SwinConfig::default() };
    for (hh, ww) in [(8, 8), (5, 7)] {
        let sb = SwinBlock::new("s", 8, cfg.clone());
        let store = ParamStore::<f32>::from_specs(&sb.specs(), 1).unwrap();
        let mut cx = Ctx::new(&store, Mode::Train);
        let x = cx.input(Tensor::ones([2, 8, hh, ww]), false);
        let y = sb.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(y), Shape::new(2, 8, hh, ww));

        let c = Cst::new("c", 6, 16, cfg.clone());
        let store = ParamStore::<f32>::from_specs(&c.specs(), 1).unwrap();
        let mut cx = Ctx::new(&store, Mode::Train);
        let x = cx.input(Tensor::ones([1, 6, hh, ww]), false);
        let (a, b) = c.branches(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(a).c() + cx.tape.shape(b).c(), 16);
        let y = c.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.shape(y), Shape::new(1, 16, hh, ww));
    }
}

#[test]
fn swin_rejects_indivisible_heads() {
    let cfg = SwinConfig { window: 2, heads: 3, ..SwinConfig::default() };
    let sb = SwinBlock::new("s", 8, cfg);
    let store = ParamStore::<f32>::from_specs(&sb.specs(), 1).unwrap();
    let mut cx = Ctx::new(&store, Mode::Train);
    let x = cx.input(Tensor::ones([1, 8, 4, 4]), false);
    assert!(matches!(sb.forward(&mut cx, x), Err(cst_yolo::Error::Shape(_))));
}

#[test]
fn cst_branch_b_vanishes_when_zeroed() {
    let c = Cst::new("c", 4, 8, SwinConfig { window: 2, heads: 2, ..SwinConfig::default() });
    let mut specs = c.specs();
    for s in specs.iter_mut() {
        let zero = s.name.starts_with("c.cv2.conv")
            || s.name.starts_with("c.cv2.bn.bias")
            || (s.name.starts_with("c.swin") && (s.name.ends_with(".bias") || s.name.contains(".proj.") || s.name.contains(".fc2.")));
        if zero {
            s.init = Init::Const(0.0);
        }
    }
    let store = ParamStore::<f64>::from_specs(&specs, 4).unwrap();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let x = cx.input(rand_tensor([1, 4, 4, 4], 8), false);
    let (_, b) = c.branches(&mut cx, x).unwrap();
    assert!(cx.tape.value(b).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mcs_identity_with_zero_output_conv_and_gate_range() {
    let m = Mcs::new("m", 8, 256);
    let mut specs = m.specs();
    for s in specs.iter_mut().filter(|s| s.name.starts_with("m.out")) {
        s.init = Init::Const(0.0);
    }
    let store = ParamStore::<f64>::from_specs(&specs, 1).unwrap();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let x = cx.input(rand_tensor([2, 8, 12, 9], 3), false);
    let (g, gate) = m.gated(&mut cx, x).unwrap();
    assert_eq!(cx.tape.shape(g), Shape::new(2, 1024, 12, 9));
    assert!(cx.tape.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let y = m.forward(&mut cx, x).unwrap();
    assert_eq!(cx.tape.value(y), cx.tape.value(x));

    let mut cx = Ctx::new(&store, Mode::Eval);
    let small = cx.input(rand_tensor([1, 8, 5, 5], 3), false);
    assert!(m.forward(&mut cx, small).is_err());
}

#[test]
fn catconv_shapes() {
    let c = CatConv::new("cc", 8, 4);
    let store = ParamStore::<f32>::from_specs(&c.specs(), 1).unwrap();
    let mut cx = Ctx::new(&store, Mode::Train);
    let x = cx.input(Tensor::ones([1, 8, 40, 40]), false);
    let y = c.forward(&mut cx, x).unwrap();
    assert_eq!(cx.tape.shape(y), Shape::new(1, 4 + 2 * 4, 20, 20));
}

#[test]
fn welan_scales_taps_by_normalised_weights() {
    let e = welan_backbone("e", 4, 4, 8, WElanVariant::V1);
    let mut store = ParamStore::<f64>::from_specs(&e.specs(), 3).unwrap();
    store.set("e.fuse_w", Tensor::new([1, 1, 1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let plain = Elan::backbone("e", 4, 4, 8);
    let x = rand_tensor([1, 4, 6, 6], 2);

    let mut cx = Ctx::new(&store, Mode::Eval);
    let xv = cx.input(x.clone(), false);
    let weighted = e.taps_forward(&mut cx, xv).unwrap();
    let mut cx2 = Ctx::new(&store, Mode::Eval);
    let xv2 = cx2.input(x, false);
    let raw = plain.taps_forward(&mut cx2, xv2).unwrap();
    let w0 = 1.0 / (1.0 + 1e-4);
    for (i, (a, b)) in weighted.iter().zip(&raw).enumerate() {
        let scale = if i == 0 { w0 } else { 0.0 };
        let d = cx
            .tape
            .value(*a)
            .data()
            .iter()
            .zip(cx2.tape.value(*b).data())
            .map(|(p, q)| (p - q * scale).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-12, "tap {i}");
    }
    assert_eq!(welan_neck("n", 4, 4, 2, 8, WElanVariant::V2).num_weights(), 4);
    assert_eq!(welan_backbone("b", 4, 4, 8, WElanVariant::V2).num_weights(), 2);
}

#[test]
fn block_gradients() {
    let cfg = SwinConfig { window: 4, heads: 2, ..SwinConfig::default() };
    let cases: Vec<(&str, f64)> = vec![
        ("cbs", gradcheck("cbs", &Cbs::cbs("c", 3, 4, 3, 2), [2, 3, 8, 8], 1e-5)),
        ("elan", gradcheck("elan", &Elan::backbone("e", 4, 4, 8), [2, 4, 8, 8], 1e-5)),
        ("mpconv", gradcheck("mpconv", &MpConv::new("m", 4, 4), [2, 4, 8, 8], 1e-6)),
        ("cbsconcat", gradcheck("cbsconcat", &CbsConcat::new("m", 4, 4), [2, 4, 8, 8], 1e-5)),
        ("sppcspc", gradcheck("sppcspc", &Sppcspc::new("s", 8, 4), [2, 8, 8, 8], 1e-6)),
        ("repconv", gradcheck("repconv", &RepConv::new("r", 4, 4), [2, 4, 8, 8], 1e-5)),
        ("swin_block", gradcheck("swin", &SwinBlock::new("s", 8, cfg.clone()), [1, 8, 8, 8], 1e-5)),
        ("cst_forward", gradcheck("cst", &Cst::new("c", 8, 8, cfg), [1, 8, 8, 8], 1e-5)),
        ("welan_forward v1", gradcheck("w1", &welan_backbone("w", 8, 4, 8, WElanVariant::V1), [1, 8, 8, 8], 1e-5)),
        ("welan_forward v2", gradcheck("w2", &welan_neck("w", 8, 4, 2, 8, WElanVariant::V2), [1, 8, 8, 8], 1e-5)),
        ("mcs_forward", gradcheck("mcs", &Mcs::new("m", 8, 256), [1, 8, 8, 8], 1e-5)),
        ("catconv_forward", gradcheck("catconv", &CatConv::new("c", 8, 4), [1, 8, 8, 8], 1e-5)),
    ];
    for (name, err) in &cases {
        assert!(*err < 1e-4, "{name}: max relative error {err:e}");
    }
}

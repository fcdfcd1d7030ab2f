use std::path::{Path, PathBuf};

use cst_yolo::boxes::BBox;
use cst_yolo::data::{
    blood_classes, letterbox, load_split, parse_voc_file, parse_voc_str, render_scene, synth_blobs, to_voc_xml,
    Annotation, Letterbox, Split, SplitManifest, SynthOptions, VocObject, PAD_GRAY,
};
use cst_yolo::Error;
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn voc_fixture_has_one_exact_rbc() {
    let a = parse_voc_file(&fixture("rbc_single.xml")).unwrap();
    assert_eq!((a.width, a.height, a.depth), (64, 80, 3));
    assert_eq!(a.objects.len(), 1);
    assert_eq!(a.objects[0].name, "RBC");
    assert_eq!(a.objects[0].bbox, BBox::new(10.0, 20.0, 50.0, 60.0));
    let labels = a.labels(&blood_classes());
    assert_eq!(labels.boxes[0].class, 1);
    assert!(labels.unknown.is_empty());
}

#[test]
fn voc_serialisation_is_a_fixed_point() {
    let a = parse_voc_file(&fixture("rbc_single.xml")).unwrap();
    let once = to_voc_xml(&a);
    let b = parse_voc_str(&once, Path::new("mem.xml")).unwrap();
    assert_eq!(a, b);
    assert_eq!(once, to_voc_xml(&b));
}

#[test]
fn voc_edge_cases() {
    let empty = "<annotation><size><width>8</width><height>8</height></size></annotation>";
    assert!(parse_voc_str(empty, Path::new("e.xml")).unwrap().objects.is_empty());
    let unknown = "<annotation><size><width>8</width><height>8</height></size>\
        <object><name>Neutrophil</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>4</xmax><ymax>4</ymax></bndbox></object></annotation>";
    let a = parse_voc_str(unknown, Path::new("u.xml")).unwrap();
    assert_eq!(a.labels(&blood_classes()).unknown, vec!["Neutrophil".to_string()]);
    let outside = unknown.replace("Neutrophil", "RBC").replace("<xmax>4", "<xmax>40");
    assert_eq!(parse_voc_str(&outside, Path::new("o.xml")).unwrap().objects[0].bbox.x2, 8.0);
    let e = parse_voc_str("<annotation>\n<size>\n<width>4</width>\n<height", Path::new("t.xml")).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
}

fn arb_annotation() -> impl Strategy<Value = Annotation> {
    let obj = (0usize..3, 0u32..100, 0u32..100, 1u32..60, 1u32..60, any::<bool>()).prop_map(|(c, x, y, w, h, d)| VocObject {
        name: blood_classes()[c].clone(),
        bbox: BBox::new(x as f64, y as f64, (x + w).min(160) as f64, (y + h).min(120) as f64),
        difficult: d,
    });
    (prop::collection::vec(obj, 0..6), "[a-z&<]{1,8}").prop_map(|(objects, stem)| Annotation {
        filename: format!("{stem}.png"),
        width: 160,
        height: 120,
        depth: 3,
        objects,
    })
}

proptest! {
    #[test]
    fn voc_round_trip(a in arb_annotation()) {
        let b = parse_voc_str(&to_voc_xml(&a), Path::new("p.xml")).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn letterbox_inverts_box_corners(w in 16u32..1200, h in 16u32..1200, t in 1u32..21,
                                     fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.0f64..1.0, fh in 0.0f64..1.0) {
        let lb = Letterbox::new(w, h, t * 32);
        let x1 = fx * w as f64;
        let y1 = fy * h as f64;
        let b = BBox::new(x1, y1, x1 + fw * (w as f64 - x1), y1 + fh * (h as f64 - y1));
        let back = lb.inverse_box(&lb.forward_box(&b));
        for (p, q) in [(b.x1, back.x1), (b.y1, back.y1), (b.x2, back.x2), (b.y2, back.y2)] {
            prop_assert!((p - q).abs() < 1e-9);
        }
        // integer-rounded input pixels stay within half a source pixel
        let f = lb.forward_box(&b);
        let r = BBox::new(f.x1.round(), f.y1.round(), f.x2.round(), f.y2.round());
        let back = lb.inverse_box(&r);
        let tol = 0.5 / lb.scale + 1e-9;
        for (p, q) in [(b.x1, back.x1), (b.y1, back.y1), (b.x2, back.x2), (b.y2, back.y2)] {
            prop_assert!((p - q).abs() <= tol);
        }
    }
}

#[test]
fn letterbox_landscape_example() {
    let img = RgbImage::from_pixel(640, 480, Rgb([10, 20, 30]));
    let (out, lb) = letterbox(&img, 640);
    assert_eq!((lb.scale, lb.pad_x, lb.pad_y), (1.0, 0, 80));
    assert_eq!(out.dimensions(), (640, 640));
    assert_eq!(out.get_pixel(0, 79).0, [PAD_GRAY; 3]);
    assert_eq!(out.get_pixel(0, 80).0, [10, 20, 30]);
    assert_eq!(out.get_pixel(639, 559).0, [10, 20, 30]);
    assert_eq!(out.get_pixel(639, 560).0, [PAD_GRAY; 3]);
    assert!(Letterbox::new(256, 256, 256).is_identity());
}

/// Writes a 4×4 image and a one-box annotation for every listed stem.
fn materialise(root: &Path, m: &SplitManifest) {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("annotations")).unwrap();
    let img = RgbImage::from_pixel(4, 4, Rgb([200, 100, 100]));
    for s in Split::ALL {
        for stem in m.files(s) {
            img.save(root.join("images").join(format!("{stem}.png"))).unwrap();
            let a = Annotation {
                filename: format!("{stem}.png"),
                width: 4,
                height: 4,
                depth: 3,
                objects: vec![VocObject { name: "WBC".into(), bbox: BBox::new(0.0, 0.0, 3.0, 3.0), difficult: false }],
            };
            std::fs::write(root.join("annotations").join(format!("{stem}.xml")), to_voc_xml(&a)).unwrap();
        }
    }
}

#[test]
fn split_fixtures_load_with_published_counts() {
    let classes = blood_classes();
    for (file, counts, val) in [
        ("bccd_manifest.txt", [327, 0, 37], Split::Test),
        ("cbc_manifest.txt", [300, 0, 60], Split::Test),
        ("bcd_manifest.txt", [255, 73, 36], Split::Val),
    ] {
        let m = SplitManifest::read(&fixture(file)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        materialise(dir.path(), &m);
        for (s, want) in Split::ALL.into_iter().zip(counts) {
            assert_eq!(load_split(dir.path(), &m, s, &classes).unwrap().len(), want, "{file} {s}");
        }
        assert_eq!(m.total(), counts.iter().sum::<usize>());
        assert_eq!(m.validation_split(), val);
    }
}

#[test]
fn manifest_header_mismatch_and_overlap_are_rejected() {
    let bad = "# counts train=2 val=0 test=0\n[train]\na\n";
    assert!(matches!(SplitManifest::parse(bad, Path::new("m.txt")), Err(Error::Config(_))));
    let dup = "# counts train=1 val=0 test=1\n[train]\na\n[test]\na\n";
    assert!(SplitManifest::parse(dup, Path::new("m.txt")).is_err());
    let m = SplitManifest::read(&fixture("bcd_manifest.txt")).unwrap();
    assert_eq!(SplitManifest::parse(&m.to_string(), Path::new("m.txt")).unwrap(), m);
}

#[test]
fn missing_image_names_the_file() {
    let m = SplitManifest::parse("# counts train=1 val=0 test=0\n[train]\nghost\n", Path::new("m.txt")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let e = load_split(dir.path(), &m, Split::Train, &blood_classes()).unwrap_err();
    assert!(matches!(&e, Error::Load(msg) if msg.contains("ghost.png")), "{e}");
}

#[test]
fn unknown_class_in_split_is_a_record_error() {
    let m = SplitManifest::parse("# counts train=1 val=0 test=0\n[train]\nx\n", Path::new("m.txt")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    materialise(dir.path(), &m);
    let e = load_split(dir.path(), &m, Split::Train, &["RBC".to_string()]).unwrap_err();
    assert!(matches!(e, Error::Record { .. }));
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "annotations"] {
        let mut names: Vec<_> = std::fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out.push(("manifest.txt".into(), std::fs::read(root.join("manifest.txt")).unwrap()));
    out
}

#[test]
fn synth_is_deterministic_and_well_formed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let opts = SynthOptions::new(7, 10, 96);
    let m = synth_blobs(&opts, a.path()).unwrap();
    synth_blobs(&opts, b.path()).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!((m.train.len(), m.val.len(), m.test.len()), (8, 1, 1));
    m.check_disjoint().unwrap();
    let records: usize =
        Split::ALL.iter().map(|&s| load_split(a.path(), &m, s, &blood_classes()).unwrap().len()).sum();
    assert_eq!(records, 10);
    let other = tempfile::tempdir().unwrap();
    synth_blobs(&SynthOptions::new(8, 10, 96), other.path()).unwrap();
    assert_ne!(tree_bytes(a.path()), tree_bytes(other.path()));
}

#[test]
fn synth_boxes_in_bounds_and_classes_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts = [0usize; 3];
    let classes = blood_classes();
    let mut total = 0;
    while total < 1000 {
        let (img, objs) = render_scene(&mut rng, 128, 6);
        assert_eq!(img.dimensions(), (128, 128));
        for o in &objs {
            let b = o.bbox;
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 128.0 && b.y2 <= 128.0 && !b.is_degenerate(), "{b:?}");
            counts[classes.iter().position(|c| *c == o.name).unwrap()] += 1;
        }
        total += objs.len();
    }
    let uniform = total as f64 / 3.0;
    for c in counts {
        assert!((c as f64 - uniform).abs() <= 0.1 * uniform, "{counts:?}");
    }
    // radii ordering: WBC > RBC > Platelets
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mean = [(0.0, 0usize); 3];
    for _ in 0..50 {
        for o in render_scene(&mut rng, 256, 6).1 {
            let k = classes.iter().position(|c| *c == o.name).unwrap();
            mean[k].0 += o.bbox.width();
            mean[k].1 += 1;
        }
    }
    let m: Vec<f64> = mean.iter().map(|(s, n)| s / *n as f64).collect();
    assert!(m[0] > m[1] && m[1] > m[2], "{m:?}");
}

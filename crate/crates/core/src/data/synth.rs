//! Synthetic "blood smear" scenes: ellipses of three size classes on a
//! noisy pink background, written as PNG + VOC XML + manifest.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::SplitManifest;
use super::voc::{to_voc_xml, Annotation, VocObject};
use super::BLOOD_CLASSES;
use crate::boxes::{iou_unchecked, BBox};
use crate::error::{Error, Result};

/// Radius range per class as a fraction of the image side.
const RADIUS: [(f64, f64); 3] = [(0.07, 0.10), (0.035, 0.05), (0.012, 0.02)];
const COLOR: [[f64; 3]; 3] = [[115.0, 55.0, 165.0], [205.0, 55.0, 65.0], [70.0, 35.0, 110.0]];
const MAX_OVERLAP: f64 = 0.1;

pub struct SynthOptions {
    pub seed: u64,
    pub n_images: usize,
    pub image_size: u32,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl SynthOptions {
    pub fn new(seed: u64, n_images: usize, image_size: u32) -> Self {
        SynthOptions { seed, n_images, image_size, min_objects: 3, max_objects: 8 }
    }
}

/// One rendered scene and its annotation (filename left empty).
pub fn render_scene(rng: &mut ChaCha8Rng, size: u32, n_objects: usize) -> (RgbImage, Vec<VocObject>) {
    let s = size as f64;
    let base = [
        232.0 + rng.random_range(-8.0..8.0),
        198.0 + rng.random_range(-8.0..8.0),
        204.0 + rng.random_range(-8.0..8.0),
    ];
    let mut buf = vec![[0f64; 3]; (size * size) as usize];
    for px in buf.iter_mut() {
        let n = rng.random_range(-12.0..12.0);
        *px = [base[0] + n, base[1] + n, base[2] + n];
    }
    // low-frequency blotches
    for _ in 0..6 {
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let sigma = rng.random_range(0.1..0.3) * s;
        let amp = rng.random_range(-15.0..15.0);
        for (i, px) in buf.iter_mut().enumerate() {
            let (x, y) = ((i as u32 % size) as f64, (i as u32 / size) as f64);
            let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma);
            let g = amp * (-d2).exp();
            for c in px.iter_mut() {
                *c += g;
            }
        }
    }

    let mut objects: Vec<VocObject> = Vec::new();
    for _ in 0..n_objects {
        let class = rng.random_range(0..3usize);
        let (lo, hi) = RADIUS[class];
        for _attempt in 0..20 {
            let r = rng.random_range(lo..hi) * s;
            let rx = r * rng.random_range(0.85..1.15);
            let ry = r * rng.random_range(0.85..1.15);
            let cx = rng.random_range(rx + 1.0..s - rx - 1.0);
            let cy = rng.random_range(ry + 1.0..s - ry - 1.0);
            let bbox = BBox::new((cx - rx).floor(), (cy - ry).floor(), (cx + rx).ceil(), (cy + ry).ceil());
            if objects.iter().any(|o| iou_unchecked(&o.bbox, &bbox) > MAX_OVERLAP) {
                continue;
            }
            let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-15.0..15.0));
            let color: [f64; 3] = std::array::from_fn(|c| COLOR[class][c] + jitter[c]);
            paint_ellipse(&mut buf, size, (cx, cy), (rx, ry), color, class);
            objects.push(VocObject { name: BLOOD_CLASSES[class].to_string(), bbox, difficult: false });
            break;
        }
    }

    let img = RgbImage::from_fn(size, size, |x, y| {
        let p = buf[(y * size + x) as usize];
        Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });
    (img, objects)
}

fn paint_ellipse(buf: &mut [[f64; 3]], size: u32, c: (f64, f64), r: (f64, f64), color: [f64; 3], class: usize) {
    let x0 = (c.0 - r.0 - 1.0).max(0.0) as u32;
    let x1 = ((c.0 + r.0 + 1.0) as u32).min(size - 1);
    let y0 = (c.1 - r.1 - 1.0).max(0.0) as u32;
    let y1 = ((c.1 + r.1 + 1.0) as u32).min(size - 1);
    let rmin = r.0.min(r.1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - c.0) / r.0;
            let dy = (y as f64 + 0.5 - c.1) / r.1;
            let q = (dx * dx + dy * dy).sqrt();
            let alpha = ((1.0 - q) * rmin + 0.5).clamp(0.0, 1.0);
            if alpha <= 0.0 {
                continue;
            }
            // red cells have a pale centre, white cells a darker nucleus
            let shade = match class {
                1 => 1.0 + 0.25 * (1.0 - q).max(0.0),
                0 => 1.0 - 0.3 * ((0.5 - q).max(0.0) * 2.0),
                _ => 1.0,
            };
            let px = &mut buf[(y * size + x) as usize];
            for k in 0..3 {
                px[k] = px[k] * (1.0 - alpha) + color[k] * shade * alpha;
            }
        }
    }
}

/// Renders `n_images` scenes into `out/images`, `out/annotations` and
/// `out/manifest.txt`, split 80/10/10 in generation order.
pub fn synth_blobs(opts: &SynthOptions, out: &Path) -> Result<SplitManifest> {
    if opts.n_images == 0 {
        return Err(Error::Config("synth needs at least one image".into()));
    }
    if opts.image_size < 32 || opts.min_objects > opts.max_objects {
        return Err(Error::Config("synth needs image_size >= 32 and min_objects <= max_objects".into()));
    }
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("annotations"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut stems = Vec::with_capacity(opts.n_images);
    for i in 0..opts.n_images {
        let stem = format!("synth_{i:05}");
        let n = rng.random_range(opts.min_objects..=opts.max_objects);
        let (img, objects) = render_scene(&mut rng, opts.image_size, n);
        img.save(out.join("images").join(format!("{stem}.png")))?;
        let ann = Annotation {
            filename: format!("{stem}.png"),
            width: opts.image_size,
            height: opts.image_size,
            depth: 3,
            objects,
        };
        std::fs::write(out.join("annotations").join(format!("{stem}.xml")), to_voc_xml(&ann))?;
        stems.push(stem);
    }
    let n = opts.n_images;
    let n_train = ((n as f64 * 0.8).round() as usize).max(1);
    let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    let manifest = SplitManifest {
        dataset: format!("synth-blobs-seed{}", opts.seed),
        train: stems[..n_train].to_vec(),
        val: stems[n_train..n_train + n_val].to_vec(),
        test: stems[n_train + n_val..].to_vec(),
    };
    std::fs::write(out.join("manifest.txt"), manifest.to_string())?;
    Ok(manifest)
}

//! Dataset ingestion: VOC annotations, split manifests, image loading,
//! letterboxing and the synthetic generator.

mod letterbox;
mod manifest;
mod synth;
mod voc;

pub use letterbox::{letterbox, Letterbox, PAD_GRAY};
pub use manifest::{Split, SplitManifest};
pub use synth::{render_scene, synth_blobs, SynthOptions};
pub use voc::{parse_voc_file, parse_voc_str, to_voc_xml, Annotation, Labels, VocObject};

use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::GtBox;
use crate::tensor::Tensor;

/// Column order of every report.
pub const BLOOD_CLASSES: [&str; 3] = ["WBC", "RBC", "Platelets"];

pub fn blood_classes() -> Vec<String> {
    BLOOD_CLASSES.iter().map(|s| s.to_string()).collect()
}

const IMAGE_EXTS: [&str; 2] = ["png", "bmp"];

#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub stem: String,
    pub image_path: PathBuf,
    pub image: RgbImage,
    pub annotation: Annotation,
    pub boxes: Vec<GtBox>,
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

fn find_image(root: &Path, stem: &str) -> Result<PathBuf> {
    IMAGE_EXTS
        .iter()
        .map(|e| root.join("images").join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Load(format!("missing image {}", root.join("images").join(format!("{stem}.png")).display())))
}

/// Loads one split: `root/images/<stem>.{png,bmp}` with
/// `root/annotations/<stem>.xml`. Unknown class names are an error.
pub fn load_split(root: &Path, manifest: &SplitManifest, split: Split, classes: &[String]) -> Result<Vec<DatasetRecord>> {
    manifest
        .files(split)
        .par_iter()
        .map(|stem| {
            let image_path = find_image(root, stem)?;
            let ann_path = root.join("annotations").join(format!("{stem}.xml"));
            let annotation = parse_voc_file(&ann_path)?;
            let labels = annotation.labels(classes);
            if let Some(u) = labels.unknown.first() {
                return Err(Error::Record { path: ann_path, msg: format!("unknown class `{u}`") });
            }
            let image = load_image(&image_path)?;
            Ok(DatasetRecord { stem: stem.clone(), image_path, image, annotation, boxes: labels.boxes })
        })
        .collect()
}

/// `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_parts([1, 3, h, w].into(), data)
}

/// A letterboxed network input with its boxes in input pixels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub stem: String,
    pub image: Tensor<f32>,
    pub boxes: Vec<GtBox>,
    pub letterbox: Letterbox,
}

impl Sample {
    pub fn from_image(stem: &str, img: &RgbImage, boxes: &[GtBox], input_size: u32) -> Self {
        let (lb_img, lb) = letterbox(img, input_size);
        let boxes = boxes
            .iter()
            .map(|g| GtBox { class: g.class, bbox: lb.forward_box(&g.bbox) })
            .filter(|g| !g.bbox.is_degenerate())
            .collect();
        Sample { stem: stem.to_string(), image: image_to_tensor(&lb_img), boxes, letterbox: lb }
    }

    pub fn from_record(r: &DatasetRecord, input_size: u32) -> Self {
        Self::from_image(&r.stem, &r.image, &r.boxes, input_size)
    }
}

pub fn prepare_samples(records: &[DatasetRecord], input_size: u32) -> Vec<Sample> {
    records.par_iter().map(|r| Sample::from_record(r, input_size)).collect()
}

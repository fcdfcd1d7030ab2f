use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

pub const PAD_GRAY: u8 = 114;

/// Aspect-preserving resize into a `target`-sided square with centred
/// gray padding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub target: u32,
    pub scale: f64,
    pub new_w: u32,
    pub new_h: u32,
    pub pad_x: u32,
    pub pad_y: u32,
}

impl Letterbox {
    pub fn new(w: u32, h: u32, target: u32) -> Self {
        let scale = (target as f64 / w as f64).min(target as f64 / h as f64);
        let new_w = ((w as f64 * scale).round() as u32).clamp(1, target);
        let new_h = ((h as f64 * scale).round() as u32).clamp(1, target);
        Letterbox { target, scale, new_w, new_h, pad_x: (target - new_w) / 2, pad_y: (target - new_h) / 2 }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.pad_x == 0 && self.pad_y == 0
    }

    pub fn forward_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x as f64, y * self.scale + self.pad_y as f64)
    }

    pub fn inverse_point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x as f64) / self.scale, (y - self.pad_y as f64) / self.scale)
    }

    pub fn forward_box(&self, b: &BBox) -> BBox {
        let (x1, y1) = self.forward_point(b.x1, b.y1);
        let (x2, y2) = self.forward_point(b.x2, b.y2);
        BBox::new(x1, y1, x2, y2)
    }

    pub fn inverse_box(&self, b: &BBox) -> BBox {
        let (x1, y1) = self.inverse_point(b.x1, b.y1);
        let (x2, y2) = self.inverse_point(b.x2, b.y2);
        BBox::new(x1, y1, x2, y2)
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let mut out = RgbImage::from_pixel(self.target, self.target, Rgb([PAD_GRAY; 3]));
        if self.new_w == img.width() && self.new_h == img.height() {
            imageops::replace(&mut out, img, self.pad_x as i64, self.pad_y as i64);
        } else {
            let r = imageops::resize(img, self.new_w, self.new_h, FilterType::Triangle);
            imageops::replace(&mut out, &r, self.pad_x as i64, self.pad_y as i64);
        }
        out
    }
}

pub fn letterbox(img: &RgbImage, target: u32) -> (RgbImage, Letterbox) {
    let lb = Letterbox::new(img.width(), img.height(), target);
    (lb.apply(img), lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landscape_pads_vertically() {
        let lb = Letterbox::new(640, 480, 640);
        assert_eq!((lb.scale, lb.pad_x, lb.pad_y, lb.new_h), (1.0, 0, 80, 480));
        let img = RgbImage::from_pixel(640, 480, Rgb([10, 20, 30]));
        let out = lb.apply(&img);
        assert_eq!(out.get_pixel(0, 79), &Rgb([PAD_GRAY; 3]));
        assert_eq!(out.get_pixel(0, 80), &Rgb([10, 20, 30]));
        assert_eq!(out.get_pixel(0, 559), &Rgb([10, 20, 30]));
        assert_eq!(out.get_pixel(0, 560), &Rgb([PAD_GRAY; 3]));
    }

    #[test]
    fn square_is_identity() {
        assert!(Letterbox::new(256, 256, 256).is_identity());
    }
}

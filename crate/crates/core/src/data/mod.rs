//! Synthetic scenes, raster I/O, datasets and augmentation.

mod dataset;
mod raster;
mod scene;

pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetMeta};
pub use raster::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_raster, write_raster};
pub use scene::{
    class_appearance, generate_scene, rare_disk_area, RareClass, SceneConfig, ShapeKind,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor, VOID_LABEL};

/// One image (1x3xHxW, values in [0, 1]) with its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || (s.h, s.w) != (labels.height, labels.width) {
            return Err(Error::dim(format!(
                "sample image {s} does not match {}x{} labels",
                labels.height, labels.width
            )));
        }
        Ok(Sample { image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

/// Zero-pads the image and void-pads the labels on the bottom and right.
pub fn pad_to_square(sample: &Sample, size: usize) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if h > size || w > size {
        return Err(Error::data(format!(
            "{h}x{w} sample does not fit a {size}x{size} canvas"
        )));
    }
    let mut image = Tensor::zeros(Shape::new(1, 3, size, size));
    let mut labels = LabelMap::filled(size, size, VOID_LABEL);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                image.set(0, c, y, x, sample.image.at(0, c, y, x));
            }
            labels.set(y, x, sample.labels.at(y, x));
        }
    }
    Sample::new(image, labels)
}

/// Mirrors image and labels about the vertical axis.
pub fn hflip(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let image = Tensor::from_fn(sample.image.shape(), |_, c, y, x| {
        sample.image.at(0, c, y, w - 1 - x)
    });
    let mut labels = sample.labels.clone();
    for y in 0..h {
        for x in 0..w {
            labels.set(y, x, sample.labels.at(y, w - 1 - x));
        }
    }
    Sample { image, labels }
}

/// [`hflip`] with probability one half.
pub fn random_hflip(sample: &Sample, rng: &mut impl Rng) -> Sample {
    if rng.random_bool(0.5) {
        hflip(sample)
    } else {
        sample.clone()
    }
}

/// Scales so the longer side equals `max_px`: bilinear for the image,
/// nearest-neighbour for the labels.
pub fn resize_max_side(sample: &Sample, max_px: usize) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if max_px == 0 {
        return Err(Error::config("resize target must be positive"));
    }
    let longest = h.max(w);
    if longest == max_px {
        return Ok(sample.clone());
    }
    let scale = longest as f64 / max_px as f64;
    let nh = ((h as f64 / scale).round() as usize).max(1);
    let nw = ((w as f64 / scale).round() as usize).max(1);
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let axis = |dst: usize, s: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let image = Tensor::from_fn(Shape::new(1, 3, nh, nw), |_, c, y, x| {
        let (y0, y1, fy) = axis(y, sy, h);
        let (x0, x1, fx) = axis(x, sx, w);
        let at = |yy, xx| sample.image.at(0, c, yy, xx);
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    });
    let mut labels = LabelMap::filled(nh, nw, VOID_LABEL);
    for y in 0..nh {
        let yy = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
        for x in 0..nw {
            let xx = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
            labels.set(y, x, sample.labels.at(yy, xx));
        }
    }
    Sample::new(image, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Sample {
        let image = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
            (c + y * w + x) as f64 / 100.0
        });
        let labels = LabelMap::new(h, w, (0..h * w).map(|i| (i % 3) as u8).collect()).unwrap();
        Sample::new(image, labels).unwrap()
    }

    #[test]
    fn pad_marks_new_pixels_void() {
        let s = ramp(3, 2);
        let p = pad_to_square(&s, 4).unwrap();
        assert_eq!(p.labels.at(2, 1), s.labels.at(2, 1));
        assert_eq!(p.labels.at(0, 2), VOID_LABEL);
        assert_eq!(p.labels.at(3, 0), VOID_LABEL);
        assert_eq!(p.image.at(0, 1, 3, 3), 0.0);
        assert_eq!(pad_to_square(&p, 4).unwrap(), p);
        assert!(pad_to_square(&s, 2).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let s = ramp(2, 3);
        assert_eq!(hflip(&hflip(&s)), s);
        let lm = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let two = Sample::new(Tensor::zeros(Shape::new(1, 3, 1, 2)), lm).unwrap();
        assert_eq!(hflip(&two).labels.data, vec![1, 0]);
    }

    #[test]
    fn resize_keeps_constants_and_aspect() {
        let s = Sample::new(
            Tensor::filled(Shape::new(1, 3, 8, 4), 0.4),
            LabelMap::filled(8, 4, 2),
        )
        .unwrap();
        let r = resize_max_side(&s, 4).unwrap();
        assert_eq!((r.height(), r.width()), (4, 2));
        assert!(r.image.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(r.labels.data.iter().all(|&l| l == 2));
        assert_eq!(resize_max_side(&s, 8).unwrap(), s);
    }
}

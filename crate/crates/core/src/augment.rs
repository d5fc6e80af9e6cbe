//! Training-time augmentations: random crop, Gaussian blur, Gaussian noise
//! and JPEG compression, each applied independently with its own
//! probability. Artifact boxes follow the crop.

use image::codecs::jpeg::JpegEncoder;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image_ops::Image;
use crate::rng::Rng;
use crate::{Error, Result};

/// Boxes keeping less than this fraction of their area after a crop are
/// dropped.
pub const MIN_KEPT_AREA: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_fraction_range: [f64; 2],
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub jpeg_quality_range: [u8; 2],
    pub crop_probability: f64,
    pub blur_probability: f64,
    pub noise_probability: f64,
    pub jpeg_probability: f64,
    /// Side of the square output.
    pub output_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_fraction_range: [0.85, 1.0],
            blur_sigma_range: [0.0, 2.0],
            noise_sigma_range: [0.0, 0.05],
            jpeg_quality_range: [40, 95],
            crop_probability: 0.5,
            blur_probability: 0.5,
            noise_probability: 0.5,
            jpeg_probability: 0.5,
            output_size: 112,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        Self {
            crop_probability: 0.0,
            blur_probability: 0.0,
            noise_probability: 0.0,
            jpeg_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2], lo: f64, hi: f64| {
            if r[0] > r[1] || r[0] < lo || r[1] > hi {
                Err(Error::invalid(format!(
                    "{name} {r:?} must be ordered within [{lo}, {hi}]"
                )))
            } else {
                Ok(())
            }
        };
        ordered("crop_fraction_range", self.crop_fraction_range, f64::MIN_POSITIVE, 1.0)?;
        ordered("blur_sigma_range", self.blur_sigma_range, 0.0, f64::INFINITY)?;
        ordered("noise_sigma_range", self.noise_sigma_range, 0.0, f64::INFINITY)?;
        let q = self.jpeg_quality_range;
        if q[0] > q[1] || q[0] == 0 || q[1] > 100 {
            return Err(Error::invalid(format!(
                "jpeg_quality_range {q:?} must be ordered within [1, 100]"
            )));
        }
        for (name, p) in [
            ("crop_probability", self.crop_probability),
            ("blur_probability", self.blur_probability),
            ("noise_probability", self.noise_probability),
            ("jpeg_probability", self.jpeg_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} must be in [0, 1]")));
            }
        }
        if self.output_size < crate::image_ops::MIN_SIDE {
            return Err(Error::invalid("output_size too small"));
        }
        Ok(())
    }
}

/// Pixel corner box `[x0, y0, x1, y1]`.
pub type PixelBox = [f64; 4];

fn draw(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Crops to `(y0, x0, h, w)` and carries boxes along: clipped, dropped when
/// under [`MIN_KEPT_AREA`] of their original area, shifted into the crop.
pub fn crop_with_boxes(
    img: &Image,
    boxes: &[PixelBox],
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Result<(Image, Vec<PixelBox>)> {
    let out = img.crop(y0, x0, h, w)?;
    let (fx, fy) = (x0 as f64, y0 as f64);
    let kept = boxes
        .iter()
        .filter_map(|b| {
            let c = [
                b[0].max(fx),
                b[1].max(fy),
                b[2].min(fx + w as f64),
                b[3].min(fy + h as f64),
            ];
            let area = (b[2] - b[0]) * (b[3] - b[1]);
            let kept = (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0);
            (kept > 0.0 && kept >= MIN_KEPT_AREA * area).then(|| [c[0] - fx, c[1] - fy, c[2] - fx, c[3] - fy])
        })
        .collect();
    Ok((out, kept))
}

pub fn add_gaussian_noise(img: &Image, sigma: f64, rng: &mut Rng) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let data = img
        .data()
        .iter()
        .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Image::new(img.height(), img.width(), data).expect("same shape")
}

/// Encodes to an in-memory JPEG at `quality` and decodes it again.
pub fn jpeg_round_trip(img: &Image, quality: u8) -> Result<Image> {
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
    Image::from_rgb8(&decoded.to_rgb8())
}

/// Applies each enabled augmentation with its probability, in the order
/// crop, blur, noise, JPEG, then resizes to `output_size`. Boxes are pixel
/// corners in the input frame and come back in the output frame.
pub fn augment(img: &Image, boxes: &[PixelBox], cfg: &AugmentConfig, rng: &mut Rng) -> Result<(Image, Vec<PixelBox>)> {
    for b in boxes {
        if !(b[0] >= 0.0
            && b[1] >= 0.0
            && b[2] <= img.width() as f64
            && b[3] <= img.height() as f64
            && b[2] > b[0]
            && b[3] > b[1])
        {
            return Err(Error::invalid(format!(
                "box {b:?} outside {}x{} image",
                img.width(),
                img.height()
            )));
        }
    }
    let mut out = img.clone();
    let mut boxes = boxes.to_vec();

    if rng.random_bool(cfg.crop_probability) {
        let f = draw(rng, cfg.crop_fraction_range);
        let h = ((out.height() as f64 * f).round() as usize).clamp(crate::image_ops::MIN_SIDE, out.height());
        let w = ((out.width() as f64 * f).round() as usize).clamp(crate::image_ops::MIN_SIDE, out.width());
        let y0 = rng.random_range(0..=out.height() - h);
        let x0 = rng.random_range(0..=out.width() - w);
        (out, boxes) = crop_with_boxes(&out, &boxes, y0, x0, h, w)?;
    }
    if rng.random_bool(cfg.blur_probability) {
        out = out.gaussian_blur(draw(rng, cfg.blur_sigma_range));
    }
    if rng.random_bool(cfg.noise_probability) {
        let sigma = draw(rng, cfg.noise_sigma_range);
        out = add_gaussian_noise(&out, sigma, rng);
    }
    if rng.random_bool(cfg.jpeg_probability) {
        let q = rng.random_range(cfg.jpeg_quality_range[0]..=cfg.jpeg_quality_range[1]);
        out = jpeg_round_trip(&out, q)?;
    }

    let size = cfg.output_size;
    if out.height() != size || out.width() != size {
        let sx = size as f64 / out.width() as f64;
        let sy = size as f64 / out.height() as f64;
        for b in &mut boxes {
            *b = [b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy];
        }
        out = out.resize(size, size);
    }
    Ok((out, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn textured(seed: u64) -> Image {
        let mut r = stream(seed, &[]);
        Image::from_fn(112, 112, |_, _| [r.random(), r.random(), r.random()])
    }

    #[test]
    fn disabled_is_identity() {
        let img = textured(1);
        let boxes = vec![[10.0, 12.0, 50.0, 60.0]];
        let (out, b) = augment(&img, &boxes, &AugmentConfig::disabled(), &mut stream(2, &[])).unwrap();
        assert_eq!(out, img);
        assert_eq!(b, boxes);
    }

    #[test]
    fn full_crop_keeps_boxes() {
        let img = textured(1);
        let boxes = vec![[10.0, 12.0, 50.0, 60.0], [0.0, 0.0, 112.0, 112.0]];
        let (out, b) = crop_with_boxes(&img, &boxes, 0, 0, 112, 112).unwrap();
        assert_eq!(out, img);
        assert_eq!(b, boxes);
        let cfg = AugmentConfig {
            crop_probability: 1.0,
            crop_fraction_range: [1.0, 1.0],
            ..AugmentConfig::disabled()
        };
        let (out, b) = augment(&img, &boxes, &cfg, &mut stream(3, &[])).unwrap();
        assert_eq!(out, img);
        assert_eq!(b, boxes);
    }

    #[test]
    fn noise_is_deterministic() {
        let img = textured(4);
        let cfg = AugmentConfig {
            noise_probability: 1.0,
            noise_sigma_range: [0.05, 0.05],
            ..AugmentConfig::disabled()
        };
        let a = augment(&img, &[], &cfg, &mut stream(5, &[])).unwrap().0;
        let b = augment(&img, &[], &cfg, &mut stream(5, &[])).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, img);
    }

    #[test]
    fn crop_drops_mostly_removed_boxes() {
        let img = textured(6);
        // Keeps 20% of the first box and 50% of the second.
        let boxes = vec![[0.0, 0.0, 10.0, 10.0], [40.0, 40.0, 60.0, 60.0]];
        let (_, b) = crop_with_boxes(&img, &boxes, 8, 0, 100, 100).unwrap();
        assert_eq!(b, vec![[40.0, 32.0, 60.0, 52.0]]);
        let (_, b) = crop_with_boxes(&img, &boxes, 0, 50, 62, 62).unwrap();
        assert_eq!(b, vec![[0.0, 40.0, 10.0, 60.0]]);
    }

    #[test]
    fn jpeg_changes_little_at_high_quality() {
        let smooth = Image::from_fn(112, 112, |y, x| [y as f64 / 112.0, x as f64 / 112.0, 0.5]);
        let out = jpeg_round_trip(&smooth, 95).unwrap();
        assert!(out.mean_abs_diff(&smooth).unwrap() < 0.01);
    }

    #[test]
    fn rejects_bad_config() {
        let c = AugmentConfig {
            blur_sigma_range: [2.0, 1.0],
            ..AugmentConfig::default()
        };
        assert!(c.validate().is_err());
        let c = AugmentConfig {
            jpeg_probability: 1.5,
            ..AugmentConfig::default()
        };
        assert!(c.validate().is_err());
        AugmentConfig::default().validate().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn outputs_stay_valid(seed in 0u64..1000, x0 in 0.0..60.0f64, y0 in 0.0..60.0f64, w in 4.0..50.0f64, h in 4.0..50.0f64) {
            let img = textured(seed);
            let cfg = AugmentConfig {
                crop_probability: 1.0,
                blur_probability: 1.0,
                noise_probability: 1.0,
                jpeg_probability: 1.0,
                ..AugmentConfig::default()
            };
            let (out, boxes) = augment(&img, &[[x0, y0, x0 + w, y0 + h]], &cfg, &mut stream(seed, &[1])).unwrap();
            prop_assert_eq!((out.height(), out.width()), (112, 112));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for b in boxes {
                prop_assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 112.0 + 1e-9 && b[3] <= 112.0 + 1e-9);
                prop_assert!(b[2] > b[0] && b[3] > b[1]);
            }
        }
    }
}

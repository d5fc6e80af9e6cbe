//! Multi-scale facial swap.
//!
//! Given a fake image and the source frame it was made from, find the
//! window where the two differ most (largest DSSIM mass), splice that window
//! of the fake onto the source and report the window as the artifact box.
//! A global variant blends a whole-face elliptical region instead.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::image_ops::{
    alpha_blend, dssim_map, gaussian_kernel, poisson_blend, separable_filter, summed_area_table, DssimMap, Image, Mask,
    Plane,
};
use crate::rng::Rng;
use crate::{Error, Result};

/// Partial-swap window buckets at the 112-pixel working resolution.
pub const DEFAULT_PARTIAL_BUCKETS: [[usize; 2]; 3] = [[20, 40], [40, 60], [60, 80]];
/// Bucket reported for whole-image (global) swaps.
pub const GLOBAL_BUCKET: [usize; 2] = [112, 112];
pub const DEFAULT_GLOBAL_PROBABILITY: f64 = 0.25;

/// Mask values this close to full coverage are snapped to exactly 1.
const MASK_SNAP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlidingWindow {
    /// Left column.
    pub x: usize,
    /// Top row.
    pub y: usize,
    pub h: usize,
    pub w: usize,
}

impl SlidingWindow {
    /// Half-open `[x0, y0, x1, y1]`.
    pub fn to_box(&self) -> [u32; 4] {
        [
            self.x as u32,
            self.y as u32,
            (self.x + self.w) as u32,
            (self.y + self.h) as u32,
        ]
    }

    pub fn touches_border(&self, height: usize, width: usize) -> bool {
        self.x == 0 || self.y == 0 || self.x + self.w >= width || self.y + self.h >= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Genuine,
    Fake,
}

impl Label {
    /// Class index: genuine 0, fake 1.
    pub fn index(self) -> usize {
        match self {
            Label::Genuine => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Genuine
        } else {
            Label::Fake
        }
    }
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactAnnotation {
    pub image_path: String,
    pub label: Label,
    pub identity: String,
    #[serde(default)]
    pub source_path: Option<String>,
    /// Half-open pixel boxes `[x0, y0, x1, y1]`, `x` = column.
    #[serde(default)]
    pub artifact_boxes: Vec<[u32; 4]>,
}

impl ArtifactAnnotation {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.label == Label::Genuine && !self.artifact_boxes.is_empty() {
            return Err(Error::invalid(format!(
                "{}: genuine record with artifact boxes",
                self.image_path
            )));
        }
        for b in &self.artifact_boxes {
            if b[2] <= b[0] || b[3] <= b[1] || b[2] as usize > width || b[3] as usize > height {
                return Err(Error::invalid(format!(
                    "{}: box {b:?} is empty or outside {width}x{height}",
                    self.image_path
                )));
            }
        }
        Ok(())
    }

    /// Video/group key: the directory part of `image_path`.
    pub fn group_id(&self) -> String {
        match self.image_path.rfind('/') {
            Some(i) => self.image_path[..i].to_string(),
            None => self.image_path.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendKind {
    Alpha,
    Poisson,
}

/// Result of one swap: the new image plus its ground truth.
#[derive(Debug, Clone)]
pub struct SwapOutcome {
    pub image: Image,
    pub label: Label,
    pub artifact_boxes: Vec<[u32; 4]>,
    pub blend: BlendKind,
    pub bucket: [usize; 2],
    pub window: Option<SlidingWindow>,
}

impl SwapOutcome {
    pub fn annotation(
        &self,
        image_path: impl Into<String>,
        identity: impl Into<String>,
        source_path: Option<String>,
    ) -> ArtifactAnnotation {
        ArtifactAnnotation {
            image_path: image_path.into(),
            label: self.label,
            identity: identity.into(),
            source_path,
            artifact_boxes: self.artifact_boxes.clone(),
        }
    }
}

/// Top-left corner of the `h x w` window with the largest DSSIM sum.
/// Ties go to the smallest row, then the smallest column.
pub fn select_window(d: &DssimMap, h: usize, w: usize) -> Result<SlidingWindow> {
    let (mh, mw) = (d.height(), d.width());
    if h == 0 || w == 0 || h > mh || w > mw {
        return Err(Error::invalid(format!("window {h}x{w} does not fit a {mh}x{mw} map")));
    }
    let sat = summed_area_table(d);
    let mut best = SlidingWindow { x: 0, y: 0, h, w };
    let mut best_sum = f64::NEG_INFINITY;
    for y in 0..=mh - h {
        for x in 0..=mw - w {
            let s = sat.rect_sum(y, x, h, w);
            if s > best_sum {
                best_sum = s;
                best = SlidingWindow { x, y, h, w };
            }
        }
    }
    Ok(best)
}

/// Swap the most dissimilar `h x w` window (sizes drawn from `bucket`) of
/// `fake` onto `source`.
pub fn partial_swap(fake: &Image, source: &Image, bucket: [usize; 2], rng: &mut Rng) -> Result<SwapOutcome> {
    if bucket[0] == 0 || bucket[0] > bucket[1] {
        return Err(Error::invalid(format!("bad scale bucket {bucket:?}")));
    }
    let (ih, iw) = (fake.height(), fake.width());
    let h = rng.random_range(bucket[0]..=bucket[1]).min(ih);
    let w = rng.random_range(bucket[0]..=bucket[1]).min(iw);
    let use_poisson = rng.random_bool(0.5);

    let dssim = dssim_map(fake, source)?;
    if dssim.max() == 0.0 {
        return Ok(SwapOutcome {
            image: source.clone(),
            label: Label::Genuine,
            artifact_boxes: Vec::new(),
            blend: BlendKind::Alpha,
            bucket,
            window: None,
        });
    }
    let window = select_window(&dssim, h, w)?;
    let mask = Mask::rectangle(ih, iw, window.y, window.x, window.h, window.w);
    // Poisson needs a boundary ring inside the image.
    let (image, blend) = if use_poisson && !window.touches_border(ih, iw) {
        (poisson_blend(fake, source, &mask)?, BlendKind::Poisson)
    } else {
        (alpha_blend(fake, source, &mask)?, BlendKind::Alpha)
    };
    Ok(SwapOutcome {
        image,
        label: Label::Fake,
        artifact_boxes: vec![window.to_box()],
        blend,
        bucket,
        window: Some(window),
    })
}

/// Whole-face blend through a blurred elliptical mask.
pub fn global_swap(fake: &Image, source: &Image, rng: &mut Rng) -> Result<SwapOutcome> {
    if !fake.same_shape(source) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", fake.height(), fake.width()),
            actual: format!("{}x{}", source.height(), source.width()),
        });
    }
    let mask = global_mask(fake.height(), fake.width(), rng);
    let image = alpha_blend(fake, source, &mask)?;
    let bbox = mask.support_bbox().expect("elliptical mask always has support");
    Ok(SwapOutcome {
        image,
        label: Label::Fake,
        artifact_boxes: vec![bbox.map(|v| v as u32)],
        blend: BlendKind::Alpha,
        bucket: [fake.height(), fake.width()],
        window: None,
    })
}

/// Blurred central ellipse whose support spans 60-80% of each image side.
pub fn global_mask(height: usize, width: usize, rng: &mut Rng) -> Mask {
    let sigma: f64 = rng.random_range(3.0..=7.0);
    let radius = (3.0 * sigma).ceil() as usize;
    let frac_y: f64 = rng.random_range(0.6..=0.8);
    let frac_x: f64 = rng.random_range(0.6..=0.8);
    let cy = height as f64 / 2.0;
    let cx = width as f64 / 2.0;
    // The blur spreads support by `radius`; shrink the hard ellipse to match.
    let ry = (frac_y * height as f64 / 2.0 - radius as f64).max(2.0);
    let rx = (frac_x * width as f64 / 2.0 - radius as f64).max(2.0);
    let hard = Plane::from_fn(height, width, |y, x| {
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        if dy * dy + dx * dx <= 1.0 {
            1.0
        } else {
            0.0
        }
    });
    let kernel = gaussian_kernel(sigma, radius);
    let soft = separable_filter(hard.values(), height, width, &kernel);
    let values = soft
        .into_iter()
        .map(|v| {
            if v >= 1.0 - MASK_SNAP {
                1.0
            } else if v <= 0.0 {
                0.0
            } else {
                v
            }
        })
        .collect();
    Mask::new(Plane::new(height, width, values).expect("shape")).expect("values in [0, 1]")
}

/// Which swap family to use and with what buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfsConfig {
    pub global_probability: f64,
    pub partial_buckets: Vec<[usize; 2]>,
}

impl Default for MfsConfig {
    fn default() -> Self {
        Self {
            global_probability: DEFAULT_GLOBAL_PROBABILITY,
            partial_buckets: DEFAULT_PARTIAL_BUCKETS.to_vec(),
        }
    }
}

impl MfsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.global_probability) {
            return Err(Error::invalid("global_probability must be in [0, 1]"));
        }
        if self.partial_buckets.is_empty() && self.global_probability < 1.0 {
            return Err(Error::invalid("partial_buckets is empty"));
        }
        for b in &self.partial_buckets {
            if b[0] == 0 || b[0] > b[1] {
                return Err(Error::invalid(format!("bad scale bucket {b:?}")));
            }
        }
        Ok(())
    }
}

/// One MFS draw: global swap with `global_probability`, otherwise a partial
/// swap in a uniformly chosen bucket.
pub fn synthesize(fake: &Image, source: &Image, cfg: &MfsConfig, rng: &mut Rng) -> Result<SwapOutcome> {
    if rng.random_bool(cfg.global_probability) {
        let mut out = global_swap(fake, source, rng)?;
        out.bucket = GLOBAL_BUCKET;
        Ok(out)
    } else {
        let bucket = cfg.partial_buckets[rng.random_range(0..cfg.partial_buckets.len())];
        partial_swap(fake, source, bucket, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn exhaustive(d: &DssimMap, h: usize, w: usize) -> SlidingWindow {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for y in 0..=d.height() - h {
            for x in 0..=d.width() - w {
                let mut s = 0.0;
                for yy in y..y + h {
                    for xx in x..x + w {
                        s += d.get(yy, xx);
                    }
                }
                if s > best.0 {
                    best = (s, y, x);
                }
            }
        }
        SlidingWindow {
            x: best.2,
            y: best.1,
            h,
            w,
        }
    }

    fn map(h: usize, w: usize, f: impl FnMut(usize, usize) -> f64) -> DssimMap {
        DssimMap::from_plane(Plane::from_fn(h, w, f))
    }

    #[test]
    fn zero_map_selects_origin() {
        let d = map(32, 32, |_, _| 0.0);
        let win = select_window(&d, 5, 7).unwrap();
        assert_eq!((win.x, win.y), (0, 0));
    }

    #[test]
    fn single_peak_lexicographic_cover() {
        // Peak at column 10, row 12; the smallest covering row is 9, column 7.
        let d = map(32, 32, |y, x| if y == 12 && x == 10 { 1.0 } else { 0.0 });
        let win = select_window(&d, 4, 4).unwrap();
        assert_eq!(win, exhaustive(&d, 4, 4));
        assert_eq!((win.x, win.y), (7, 9));
    }

    #[test]
    fn random_maps_match_exhaustive_scan() {
        let mut rng = stream(11, &[]);
        for _ in 0..50 {
            let d = map(64, 64, |_, _| rng.random::<f64>());
            assert_eq!(select_window(&d, 16, 24).unwrap(), exhaustive(&d, 16, 24));
        }
    }

    #[test]
    fn oversized_window_rejected() {
        let d = map(16, 16, |_, _| 0.0);
        assert!(select_window(&d, 17, 4).is_err());
        assert!(select_window(&d, 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_offset(
            vals in proptest::collection::vec(0u32..256, 24 * 20),
            offset in 0u32..4,
            h in 1usize..24,
            w in 1usize..20,
        ) {
            // Dyadic values keep every sum exact.
            let d = map(24, 20, |y, x| vals[y * 20 + x] as f64 / 256.0);
            let shifted = map(24, 20, |y, x| vals[y * 20 + x] as f64 / 256.0 + offset as f64);
            prop_assert_eq!(select_window(&d, h, w).unwrap(), select_window(&shifted, h, w).unwrap());
        }
    }

    fn two_images(seed: u64) -> (Image, Image) {
        let mut rng = stream(seed, &[]);
        let source = Image::from_fn(32, 32, |_, _| [rng.random(), rng.random(), rng.random()]);
        let mut fake = source.clone();
        for y in 8..20 {
            for x in 10..22 {
                for c in 0..3 {
                    fake.set(y, x, c, 1.0 - source.get(y, x, c));
                }
            }
        }
        (fake, source)
    }

    #[test]
    fn identical_pair_is_genuine() {
        let (_, source) = two_images(1);
        let out = partial_swap(&source, &source, [8, 12], &mut stream(0, &[])).unwrap();
        assert_eq!(out.label, Label::Genuine);
        assert!(out.artifact_boxes.is_empty());
        assert_eq!(out.image, source);
    }

    #[test]
    fn alpha_window_is_exact_splice() {
        let (fake, source) = two_images(2);
        let mask = Mask::rectangle(32, 32, 4, 4, 8, 8);
        let out = alpha_blend(&fake, &source, &mask).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside = (4..12).contains(&y) && (4..12).contains(&x);
                let want = if inside { fake.pixel(y, x) } else { source.pixel(y, x) };
                assert_eq!(out.pixel(y, x), want);
            }
        }
    }

    #[test]
    fn partial_swap_box_matches_window() {
        let (fake, source) = two_images(3);
        for seed in 0..20 {
            let out = partial_swap(&fake, &source, [6, 10], &mut stream(seed, &[])).unwrap();
            let win = out.window.unwrap();
            assert_eq!(out.artifact_boxes, vec![win.to_box()]);
            assert!((6..=10).contains(&win.h) && (6..=10).contains(&win.w));
            let ann = out.annotation("a/b.png", "id", Some("a/src.png".into()));
            ann.validate(32, 32).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let inside = y >= win.y && y < win.y + win.h && x >= win.x && x < win.x + win.w;
                    if !inside {
                        assert_eq!(out.image.pixel(y, x), source.pixel(y, x));
                    } else if out.blend == BlendKind::Alpha {
                        assert_eq!(out.image.pixel(y, x), fake.pixel(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn full_bucket_degenerates_to_global() {
        let (fake, source) = two_images(4);
        let out = partial_swap(&fake, &source, [32, 32], &mut stream(5, &[])).unwrap();
        assert_eq!(out.artifact_boxes, vec![[0, 0, 32, 32]]);
        assert_eq!(out.blend, BlendKind::Alpha);
        assert_eq!(out.image, fake);
    }

    #[test]
    fn global_swap_support_and_core() {
        let mut rng = stream(9, &[]);
        let source = Image::from_fn(112, 112, |_, _| [rng.random(), rng.random(), rng.random()]);
        let fake = Image::from_fn(112, 112, |_, _| [rng.random(), rng.random(), rng.random()]);
        for seed in 0..10 {
            let mut r = stream(seed, &[1]);
            let mask = global_mask(112, 112, &mut stream(seed, &[1]));
            let out = global_swap(&fake, &source, &mut r).unwrap();
            assert_eq!(out.artifact_boxes.len(), 1);
            let b = out.artifact_boxes[0];
            assert!(b[2] > b[0] && b[3] > b[1] && b[2] <= 112 && b[3] <= 112);
            let (mut core_diff, mut core_n) = (0.0, 0usize);
            for y in 0..112 {
                for x in 0..112 {
                    let m = mask.get(y, x);
                    if m == 0.0 {
                        assert_eq!(out.image.pixel(y, x), source.pixel(y, x));
                    }
                    if m > 0.99 {
                        for c in 0..3 {
                            core_diff += (out.image.get(y, x, c) - fake.get(y, x, c)).abs();
                        }
                        core_n += 3;
                    }
                }
            }
            assert!(core_n > 0);
            assert!(core_diff / (core_n as f64) < 1e-6);
        }
    }

    #[test]
    fn synthesize_is_deterministic() {
        let (fake, source) = two_images(6);
        let cfg = MfsConfig::default();
        let a = synthesize(&fake, &source, &cfg, &mut stream(3, &[4])).unwrap();
        let b = synthesize(&fake, &source, &cfg, &mut stream(3, &[4])).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.artifact_boxes, b.artifact_boxes);
    }

    #[test]
    fn annotation_json_shape() {
        let ann = ArtifactAnnotation {
            image_path: "train/v1/000.png".into(),
            label: Label::Fake,
            identity: "id03".into(),
            source_path: Some("train/v0/000.png".into()),
            artifact_boxes: vec![[1, 2, 30, 40]],
        };
        let line = serde_json::to_string(&ann).unwrap();
        assert_eq!(
            line,
            r#"{"image_path":"train/v1/000.png","label":"fake","identity":"id03","source_path":"train/v0/000.png","artifact_boxes":[[1,2,30,40]]}"#
        );
        assert_eq!(serde_json::from_str::<ArtifactAnnotation>(&line).unwrap(), ann);
        assert_eq!(ann.group_id(), "train/v1");
        let bad = ArtifactAnnotation {
            label: Label::Genuine,
            ..ann
        };
        assert!(bad.validate(112, 112).is_err());
    }
}

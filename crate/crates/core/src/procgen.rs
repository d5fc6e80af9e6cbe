//! Procedural face dataset with controllable identities and four toy
//! face-swap methods.
//!
//! Every identity is a parametric cartoon face. A swap renders the target
//! identity with the source frame's pose and composites its inner face
//! (eyes, nose, mouth and surrounding skin) onto the source frame. Splits
//! are identity-disjoint, and inside each split the identities are divided
//! into a source group and a target group, so a binary classifier can lean
//! on identity combinations instead of blending artifacts.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::add_gaussian_noise;
use crate::image_ops::{gaussian_kernel, separable_filter, Image, Mask, Plane};
use crate::mfs::{ArtifactAnnotation, Label};
use crate::rng::{stream, Rng};
use crate::{Error, Result};

pub const IMAGE_SIZE: usize = 112;
pub const RENDER_NOISE: f64 = 0.01;
pub const MIN_IDENTITIES: usize = 8;

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_VAL: &str = "val";
pub const SPLIT_TEST: &str = "test";
pub const SPLIT_TEST_CROSS: &str = "test_cross";
pub const SPLITS: [&str; 4] = [SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST, SPLIT_TEST_CROSS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id_tag: String,
    /// Skin hue in `[0, 1)`.
    pub face_hue: f64,
    /// Head ellipse semi-axes `(x, y)` in pixels.
    pub face_ellipse_axes: [f64; 2],
    pub eye_spacing: f64,
    pub eye_size: f64,
    /// Vertical sag of the mouth corners relative to its centre, pixels.
    pub mouth_curvature: f64,
    pub nose_length: f64,
    pub background_tone: f64,
}

impl IdentitySpec {
    pub const HUE: [f64; 2] = [0.0, 0.16];
    pub const AXIS_X: [f64; 2] = [30.0, 37.0];
    pub const AXIS_Y: [f64; 2] = [38.0, 45.0];
    pub const EYE_SPACING: [f64; 2] = [18.0, 30.0];
    pub const EYE_SIZE: [f64; 2] = [2.5, 5.5];
    pub const MOUTH_CURVATURE: [f64; 2] = [-5.0, 5.0];
    pub const NOSE_LENGTH: [f64; 2] = [7.0, 15.0];
    pub const BACKGROUND: [f64; 2] = [0.45, 0.55];

    pub fn sample(id_tag: impl Into<String>, rng: &mut Rng) -> Self {
        let mut u = |r: [f64; 2]| rng.random_range(r[0]..=r[1]);
        Self {
            id_tag: id_tag.into(),
            face_hue: u(Self::HUE),
            face_ellipse_axes: [u(Self::AXIS_X), u(Self::AXIS_Y)],
            eye_spacing: u(Self::EYE_SPACING),
            eye_size: u(Self::EYE_SIZE),
            mouth_curvature: u(Self::MOUTH_CURVATURE),
            nose_length: u(Self::NOSE_LENGTH),
            background_tone: u(Self::BACKGROUND),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("face_hue", self.face_hue, Self::HUE),
            ("face_ellipse_axes.x", self.face_ellipse_axes[0], Self::AXIS_X),
            ("face_ellipse_axes.y", self.face_ellipse_axes[1], Self::AXIS_Y),
            ("eye_spacing", self.eye_spacing, Self::EYE_SPACING),
            ("eye_size", self.eye_size, Self::EYE_SIZE),
            ("mouth_curvature", self.mouth_curvature, Self::MOUTH_CURVATURE),
            ("nose_length", self.nose_length, Self::NOSE_LENGTH),
            ("background_tone", self.background_tone, Self::BACKGROUND),
        ];
        for (name, v, r) in checks {
            if !(r[0]..=r[1]).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside {r:?}")));
            }
        }
        Ok(())
    }

    fn skin(&self) -> [f64; 3] {
        hsl_to_rgb(self.face_hue, 0.45, 0.62)
    }
}

/// Head placement for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
    };

    /// Per-video base pose.
    pub fn sample(rng: &mut Rng) -> Self {
        Pose {
            dx: rng.random_range(-3.0..=3.0),
            dy: rng.random_range(-3.0..=3.0),
            scale: rng.random_range(0.95..=1.05),
        }
    }

    /// Small frame-to-frame jitter around `self`.
    pub fn jittered(&self, amount: f64, rng: &mut Rng) -> Self {
        if amount == 0.0 {
            return *self;
        }
        Pose {
            dx: self.dx + rng.random_range(-amount..=amount),
            dy: self.dy + rng.random_range(-amount..=amount),
            scale: self.scale * (1.0 + 0.01 * rng.random_range(-amount..=amount)),
        }
    }

    fn center(&self) -> (f64, f64) {
        (
            IMAGE_SIZE as f64 / 2.0 + self.dx,
            IMAGE_SIZE as f64 / 2.0 - 4.0 + self.dy,
        )
    }
}

/// A rendered frame and the pose it was drawn with.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub image: Image,
    pub pose: Pose,
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> [f64; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r + m, g + m, b + m]
}

/// Coverage in `[0, 1]` from a signed distance (negative inside), with a
/// one-pixel linear ramp.
#[inline]
fn coverage(signed: f64) -> f64 {
    (0.5 - signed).clamp(0.0, 1.0)
}

/// Approximate signed distance to an axis-aligned ellipse boundary.
#[inline]
fn ellipse_sd(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> f64 {
    let ny = (y - cy) / ry;
    let nx = (x - cx) / rx;
    let r = (ny * ny + nx * nx).sqrt();
    (r - 1.0) * rx.min(ry)
}

#[inline]
fn mix(dst: &mut [f64; 3], src: [f64; 3], a: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - a) + src[c] * a;
    }
}

/// Noise-free parametric render.
fn render_clean(spec: &IdentitySpec, pose: Pose) -> Image {
    let (cx, cy) = pose.center();
    let s = pose.scale;
    let rx = spec.face_ellipse_axes[0] * s;
    let ry = spec.face_ellipse_axes[1] * s;
    let skin = spec.skin();
    let shade = skin.map(|v| v * 0.8);
    let bg = spec.background_tone;
    let bg_rgb = [bg, bg * 0.95 + 0.03, bg * 0.9 + 0.06];
    let eye_y = cy - 8.0 * s;
    let half_spacing = spec.eye_spacing * s / 2.0;
    let eye_r = spec.eye_size * s;
    let nose_top = cy - 4.0 * s;
    let nose_bottom = nose_top + spec.nose_length * s;
    let mouth_y = cy + 18.0 * s;
    let mouth_half = 10.0 * s;

    Image::from_fn(IMAGE_SIZE, IMAGE_SIZE, |yi, xi| {
        let (y, x) = (yi as f64 + 0.5, xi as f64 + 0.5);
        let vignette = 1.0 - 0.1 * ((y - 56.0) / 56.0).powi(2);
        let mut p = bg_rgb.map(|v| v * vignette);
        let head = coverage(ellipse_sd(y, x, cy, cx, ry, rx));
        if head > 0.0 {
            // Soft top-light shading on the skin.
            let t = ((y - (cy - ry)) / (2.0 * ry)).clamp(0.0, 1.0);
            let tone = [0, 1, 2].map(|c| skin[c] * (1.0 - 0.15 * t) + shade[c] * 0.15 * t);
            mix(&mut p, tone, head);
        }
        for side in [-1.0, 1.0] {
            let ex = cx + side * half_spacing;
            let white = coverage(ellipse_sd(y, x, eye_y, ex, eye_r * 0.75, eye_r * 1.3));
            mix(&mut p, [0.95, 0.95, 0.93], white);
            let pupil = coverage(ellipse_sd(y, x, eye_y, ex, eye_r * 0.6, eye_r * 0.6));
            mix(&mut p, [0.12, 0.08, 0.05], pupil);
        }
        if y >= nose_top && y <= nose_bottom + 1.0 {
            let d = (x - cx).abs() - 1.2 * s;
            let nose = coverage(d) * coverage(y - nose_bottom);
            mix(&mut p, shade.map(|v| v * 0.85), nose);
        }
        if (x - cx).abs() <= mouth_half + 1.0 {
            let u = (x - cx) / mouth_half;
            let curve_y = mouth_y + spec.mouth_curvature * s * u * u;
            let d = (y - curve_y).abs() - 1.3 * s;
            let mouth = coverage(d) * coverage((x - cx).abs() - mouth_half);
            mix(&mut p, [0.62, 0.16, 0.18], mouth);
        }
        p
    })
}

/// Renders `spec` at `pose` jittered by `pose_jitter` pixels, with additive
/// Gaussian noise of standard deviation `noise`.
pub fn render_identity(spec: &IdentitySpec, pose: Pose, pose_jitter: f64, noise: f64, rng: &mut Rng) -> Rendering {
    let pose = pose.jittered(pose_jitter, rng);
    let clean = render_clean(spec, pose);
    Rendering {
        image: add_gaussian_noise(&clean, noise, rng),
        pose,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapMethod {
    SpliceSoft,
    SpliceHard,
    ColorShift,
    Warp,
}

impl SwapMethod {
    pub const ALL: [SwapMethod; 4] = [
        SwapMethod::SpliceSoft,
        SwapMethod::SpliceHard,
        SwapMethod::ColorShift,
        SwapMethod::Warp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SwapMethod::SpliceSoft => "splice_soft",
            SwapMethod::SpliceHard => "splice_hard",
            SwapMethod::ColorShift => "color_shift",
            SwapMethod::Warp => "warp",
        }
    }
}

/// A method plus its per-video parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapMethodSpec {
    pub method: SwapMethod,
    /// Feather sigma of the composite mask (0 for a hard edge).
    pub feather: f64,
    /// Hue offset and lightness gain of the pasted region.
    pub hue_shift: f64,
    pub gain: f64,
    /// Scale and vertical offset of the pasted face relative to the source.
    pub warp_scale: f64,
    pub warp_dy: f64,
}

impl SwapMethodSpec {
    pub fn sample(method: SwapMethod, rng: &mut Rng) -> Self {
        let mut spec = Self {
            method,
            feather: 0.0,
            hue_shift: 0.0,
            gain: 1.0,
            warp_scale: 1.0,
            warp_dy: 0.0,
        };
        // Every swap pastes a mis-exposed face, the soft splice subtly;
        // only colour_shift also rotates hue.
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let exposure = if method == SwapMethod::SpliceSoft {
            0.04..=0.10
        } else {
            0.10..=0.20
        };
        spec.gain = 1.0 + sign * rng.random_range(exposure);
        match method {
            SwapMethod::SpliceHard => {}
            SwapMethod::SpliceSoft => spec.feather = rng.random_range(2.0..=4.0),
            SwapMethod::ColorShift => {
                spec.feather = rng.random_range(1.0..=2.5);
                spec.hue_shift = rng.random_range(0.06..=0.12) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
            SwapMethod::Warp => {
                spec.feather = rng.random_range(1.0..=2.5);
                spec.warp_scale = rng.random_range(1.08..=1.18);
                spec.warp_dy = rng.random_range(-3.0..=3.0);
            }
        }
        spec
    }

    pub fn plain(method: SwapMethod) -> Self {
        let mut s = Self::sample(method, &mut stream(0, &[]));
        s.hue_shift = 0.0;
        s.gain = 1.0;
        s.warp_scale = 1.0;
        s.warp_dy = 0.0;
        s
    }
}

/// Inner-face composite mask for a head at `pose`.
fn inner_face_mask(source_spec_axes: [f64; 2], pose: Pose, feather: f64) -> Mask {
    let (cx, cy) = pose.center();
    let rx = source_spec_axes[0] * pose.scale * 0.72;
    let ry = source_spec_axes[1] * pose.scale * 0.62;
    let icy = cy + 4.0 * pose.scale;
    let hard = Plane::from_fn(IMAGE_SIZE, IMAGE_SIZE, |y, x| {
        let ny = (y as f64 + 0.5 - icy) / ry;
        let nx = (x as f64 + 0.5 - cx) / rx;
        if ny * ny + nx * nx <= 1.0 {
            1.0
        } else {
            0.0
        }
    });
    if feather <= 0.0 {
        return Mask::new(hard).expect("binary");
    }
    let radius = (3.0 * feather).ceil() as usize;
    let soft = separable_filter(hard.values(), IMAGE_SIZE, IMAGE_SIZE, &gaussian_kernel(feather, radius));
    let values = soft.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Mask::new(Plane::new(IMAGE_SIZE, IMAGE_SIZE, values).expect("shape")).expect("range")
}

fn shift_colors(img: &Image, hue_shift: f64, gain: f64) -> Image {
    if hue_shift == 0.0 && gain == 1.0 {
        return img.clone();
    }
    // Rotate chroma around the grey axis and scale lightness.
    let angle = hue_shift * std::f64::consts::TAU;
    let (sin, cos) = angle.sin_cos();
    let k = 1.0 / 3f64.sqrt();
    Image::from_fn(img.height(), img.width(), |y, x| {
        let p = img.pixel(y, x);
        // Rodrigues rotation about the unit grey axis.
        let mean = (p[0] + p[1] + p[2]) / 3.0;
        let cross = [k * (p[2] - p[1]), k * (p[0] - p[2]), k * (p[1] - p[0])];
        [0, 1, 2].map(|c| gain * (p[c] * cos + cross[c] * sin + mean * (1.0 - cos)))
    })
}

/// Outcome of a toy swap.
#[derive(Debug, Clone)]
pub struct ToySwap {
    pub image: Image,
    /// Half-open `[x0, y0, x1, y1]` of the manipulated region.
    pub artifact_box: [u32; 4],
}

/// Composites `target`'s inner face onto `source` using `method`.
pub fn toy_swap(
    source: &Rendering,
    source_spec: &IdentitySpec,
    target: &IdentitySpec,
    method: &SwapMethodSpec,
    noise: f64,
    rng: &mut Rng,
) -> ToySwap {
    let mut pose = source.pose;
    if method.method == SwapMethod::Warp {
        pose.scale *= method.warp_scale;
        pose.dy += method.warp_dy;
    }
    let donor = add_gaussian_noise(&render_clean(target, pose), noise, rng);
    let donor = shift_colors(&donor, method.hue_shift, method.gain);
    let mask = inner_face_mask(source_spec.face_ellipse_axes, source.pose, method.feather);
    let image = crate::image_ops::alpha_blend(&donor, &source.image, &mask).expect("same shapes");
    let bbox = mask.support_bbox().expect("inner face mask is never empty");
    ToySwap {
        image,
        artifact_box: bbox.map(|v| v as u32),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_identities: usize,
    pub n_images_per_id: usize,
    pub frames_per_video: usize,
    pub methods_in_train: Vec<SwapMethod>,
    /// Keep every identity inside a single split.
    pub identity_disjoint: bool,
    pub pose_jitter: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_identities: 16,
            n_images_per_id: 16,
            frames_per_video: 8,
            methods_in_train: vec![SwapMethod::SpliceHard, SwapMethod::ColorShift, SwapMethod::Warp],
            identity_disjoint: true,
            pose_jitter: 1.0,
            noise: RENDER_NOISE,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < MIN_IDENTITIES {
            return Err(Error::invalid(format!(
                "n_identities must be at least {MIN_IDENTITIES}, got {}",
                self.n_identities
            )));
        }
        if self.frames_per_video == 0
            || self.n_images_per_id == 0
            || !self.n_images_per_id.is_multiple_of(self.frames_per_video)
        {
            return Err(Error::invalid(
                "n_images_per_id must be a positive multiple of frames_per_video",
            ));
        }
        if self.methods_in_train.is_empty() {
            return Err(Error::invalid("methods_in_train is empty"));
        }
        Ok(())
    }

    pub fn held_out_methods(&self) -> Vec<SwapMethod> {
        SwapMethod::ALL
            .into_iter()
            .filter(|m| !self.methods_in_train.contains(m))
            .collect()
    }
}

/// Which identities each split draws on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub split: String,
    pub source_group: Vec<String>,
    pub target_group: Vec<String>,
    pub methods: Vec<SwapMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub identities: Vec<IdentitySpec>,
    pub plans: Vec<SplitPlan>,
    pub cross_method_empty: bool,
    pub counts: BTreeMap<String, usize>,
}

/// In-memory dataset: annotations per split plus every referenced image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<String, Vec<ArtifactAnnotation>>,
    pub images: BTreeMap<String, Image>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[ArtifactAnnotation] {
        self.splits.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn image(&self, path: &str) -> Result<&Image> {
        self.images
            .get(path)
            .ok_or_else(|| Error::invalid(format!("image {path} not in dataset")))
    }

    /// Writes PNGs, one `<split>.jsonl` per split and `manifest.json`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (path, img) in &self.images {
            let full = dir.join(path);
            if let Some(parent) = full.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save_png(&full)?;
        }
        for (name, records) in &self.splits {
            write_annotations(dir.join(format!("{name}.jsonl")), records)?;
        }
        let manifest = dir.join("manifest.json");
        let body = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(&manifest, body).map_err(|e| Error::io(&manifest, e))
    }

    /// Reads a directory written by [`Dataset::write_to`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.json");
        let manifest: DatasetManifest =
            serde_json::from_slice(&std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
        let mut splits = BTreeMap::new();
        let mut images = BTreeMap::new();
        for name in SPLITS {
            let path = dir.join(format!("{name}.jsonl"));
            if !path.exists() {
                continue;
            }
            let records = read_annotations(&path)?;
            for r in &records {
                for p in std::iter::once(&r.image_path).chain(r.source_path.iter()) {
                    if !images.contains_key(p) {
                        images.insert(p.clone(), Image::load_png(dir.join(p))?);
                    }
                }
            }
            splits.insert(name.to_string(), records);
        }
        Ok(Self {
            manifest,
            splits,
            images,
        })
    }
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[ArtifactAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<ArtifactAnnotation>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// One genuine video: identity index, video index within the identity,
/// and its frames.
struct GenuineVideo {
    identity: usize,
    video: usize,
    frames: Vec<Rendering>,
    paths: Vec<String>,
}

/// Generates the whole dataset deterministically from `config`.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let seed = config.seed;
    let identities: Vec<IdentitySpec> = (0..config.n_identities)
        .map(|i| IdentitySpec::sample(format!("id{i:02}"), &mut stream(seed, &[1, i as u64])))
        .collect();

    let mut order: Vec<usize> = (0..config.n_identities).collect();
    order.shuffle(&mut stream(seed, &[2]));
    let n = config.n_identities;
    let (train_ids, val_ids, test_ids) = if config.identity_disjoint {
        let n_train = n / 2;
        let n_val = (n / 8).max(2);
        (
            order[..n_train].to_vec(),
            order[n_train..n_train + n_val].to_vec(),
            order[n_train + n_val..].to_vec(),
        )
    } else {
        (order.clone(), order.clone(), order.clone())
    };

    let held_out = config.held_out_methods();
    let cross_method_empty = held_out.is_empty();
    let videos_per_id = config.n_images_per_id / config.frames_per_video;

    let mut dataset = Dataset {
        manifest: DatasetManifest {
            config: config.clone(),
            identities: identities.clone(),
            plans: Vec::new(),
            cross_method_empty,
            counts: BTreeMap::new(),
        },
        splits: BTreeMap::new(),
        images: BTreeMap::new(),
    };

    let plans = [
        (SPLIT_TRAIN, SPLIT_TRAIN, &train_ids, config.methods_in_train.clone()),
        (SPLIT_VAL, SPLIT_VAL, &val_ids, config.methods_in_train.clone()),
        (SPLIT_TEST, SPLIT_TEST, &test_ids, config.methods_in_train.clone()),
        (SPLIT_TEST_CROSS, SPLIT_TEST, &test_ids, held_out),
    ];
    for (split_index, (split, genuine_dir, ids, methods)) in plans.into_iter().enumerate() {
        let half = ids.len() / 2;
        let source_group = &ids[..half.max(1)];
        let target_group = &ids[half.max(1)..];
        dataset.manifest.plans.push(SplitPlan {
            split: split.to_string(),
            source_group: source_group.iter().map(|&i| identities[i].id_tag.clone()).collect(),
            target_group: target_group.iter().map(|&i| identities[i].id_tag.clone()).collect(),
            methods: methods.clone(),
        });

        // Genuine videos; the cross-method split reuses the test genuines.
        let mut genuine = Vec::new();
        for &id in ids.iter() {
            for v in 0..videos_per_id {
                let mut rng = stream(seed, &[3, id as u64, v as u64, split_index.min(2) as u64]);
                let base = Pose::sample(&mut rng);
                let mut frames = Vec::new();
                let mut paths = Vec::new();
                for f in 0..config.frames_per_video {
                    let mut fr = stream(seed, &[4, id as u64, v as u64, f as u64, split_index.min(2) as u64]);
                    let r = render_identity(&identities[id], base, config.pose_jitter, config.noise, &mut fr);
                    let path = format!("{genuine_dir}/real_{}_v{v}/{f:03}.png", identities[id].id_tag);
                    frames.push(Rendering {
                        image: r.image.quantized(),
                        pose: r.pose,
                    });
                    paths.push(path);
                }
                genuine.push(GenuineVideo {
                    identity: id,
                    video: v,
                    frames,
                    paths,
                });
            }
        }

        let mut records = Vec::new();
        for g in &genuine {
            for (frame, path) in g.frames.iter().zip(&g.paths) {
                dataset.images.insert(path.clone(), frame.image.clone());
                records.push(ArtifactAnnotation {
                    image_path: path.clone(),
                    label: Label::Genuine,
                    identity: identities[g.identity].id_tag.clone(),
                    source_path: None,
                    artifact_boxes: Vec::new(),
                });
            }
        }

        if !methods.is_empty() && !target_group.is_empty() {
            let sources: Vec<&GenuineVideo> = genuine.iter().filter(|g| source_group.contains(&g.identity)).collect();
            // As many fake videos as genuine ones.
            for k in 0..genuine.len() {
                let src = sources[k % sources.len()];
                let round = k / sources.len();
                let tgt = target_group[(src.identity + round) % target_group.len()];
                let method = methods[k % methods.len()];
                let mut vr = stream(seed, &[5, split_index as u64, k as u64]);
                let mspec = SwapMethodSpec::sample(method, &mut vr);
                let video_dir = format!(
                    "{split}/fake_{}_{}_{}_v{}_{k}",
                    method.tag(),
                    identities[src.identity].id_tag,
                    identities[tgt].id_tag,
                    src.video
                );
                for (f, (frame, src_path)) in src.frames.iter().zip(&src.paths).enumerate() {
                    let mut fr = stream(seed, &[6, split_index as u64, k as u64, f as u64]);
                    let swap = toy_swap(
                        frame,
                        &identities[src.identity],
                        &identities[tgt],
                        &mspec,
                        config.noise,
                        &mut fr,
                    );
                    let path = format!("{video_dir}/{f:03}.png");
                    dataset.images.insert(path.clone(), swap.image.quantized());
                    records.push(ArtifactAnnotation {
                        image_path: path,
                        label: Label::Fake,
                        identity: identities[src.identity].id_tag.clone(),
                        source_path: Some(src_path.clone()),
                        artifact_boxes: vec![swap.artifact_box],
                    });
                }
            }
        } else {
            // Nothing to fake with: the split stays empty rather than all-genuine.
            records.clear();
        }
        dataset.manifest.counts.insert(split.to_string(), records.len());
        dataset.splits.insert(split.to_string(), records);
    }
    // Drop genuine images that ended up unreferenced (empty cross split).
    let referenced: std::collections::BTreeSet<String> = dataset
        .splits
        .values()
        .flatten()
        .flat_map(|r| std::iter::once(r.image_path.clone()).chain(r.source_path.clone()))
        .collect();
    dataset.images.retain(|k, _| referenced.contains(k));
    Ok(dataset)
}

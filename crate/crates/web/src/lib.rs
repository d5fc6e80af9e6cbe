//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A [`Scene`] is one procedural fake/source pair. The page can swap the
//! most dissimilar window of a chosen size, draw random multi-scale swaps,
//! and match a dragged box against the default anchors.

use caddm::detection::{build_anchors, iou, normalize_box, AnchorConfig, AnchorSet, MATCH_IOU};
use caddm::image_ops::{alpha_blend, dssim_map, poisson_blend, to_u8, DssimMap, Image, Mask};
use caddm::mfs::{select_window, synthesize, BlendKind, MfsConfig, GLOBAL_BUCKET};
use caddm::procgen::{render_identity, toy_swap, IdentitySpec, Pose, SwapMethod, SwapMethodSpec, RENDER_NOISE};
use caddm::rng::stream;
use wasm_bindgen::prelude::*;

fn js_err(e: caddm::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &Image) -> Vec<u8> {
    img.data()
        .chunks_exact(3)
        .flat_map(|p| [to_u8(p[0]), to_u8(p[1]), to_u8(p[2]), 255])
        .collect()
}

/// Black to red to yellow, scaled by the map maximum.
fn heatmap(d: &DssimMap) -> Vec<u8> {
    let max = d.max().max(1e-12);
    d.values()
        .iter()
        .flat_map(|v| {
            let t = (v / max).clamp(0.0, 1.0);
            let r = (2.0 * t).min(1.0);
            let g = (2.0 * t - 1.0).max(0.0);
            [to_u8(r), to_u8(g), 0, 255]
        })
        .collect()
}

fn parse_method(tag: &str) -> caddm::Result<SwapMethod> {
    SwapMethod::ALL
        .into_iter()
        .find(|m| m.tag() == tag)
        .ok_or_else(|| caddm::Error::InvalidInput(format!("unknown swap method {tag:?}")))
}

/// A swapped image and its artifact box.
#[wasm_bindgen]
pub struct Swap {
    image: Vec<u8>,
    artifact_box: Vec<u32>,
    blend: BlendKind,
    global: bool,
}

#[wasm_bindgen]
impl Swap {
    /// RGBA bytes, row-major.
    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    /// `[x0, y0, x1, y1]` in pixels, half-open; empty when nothing changed.
    #[wasm_bindgen(getter)]
    pub fn artifact_box(&self) -> Vec<u32> {
        self.artifact_box.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn blend(&self) -> String {
        match self.blend {
            BlendKind::Alpha => "alpha".into(),
            BlendKind::Poisson => "poisson".into(),
        }
    }

    #[wasm_bindgen(getter)]
    pub fn global(&self) -> bool {
        self.global
    }
}

#[wasm_bindgen]
pub struct Scene {
    fake: Image,
    source: Image,
    dssim: DssimMap,
    anchors: AnchorSet,
}

impl Scene {
    pub fn build(seed: u64, method: &str) -> caddm::Result<Scene> {
        let method = parse_method(method)?;
        let mut rng = stream(seed, &[]);
        let source_spec = IdentitySpec::sample("source", &mut rng);
        let target_spec = IdentitySpec::sample("target", &mut rng);
        let pose = Pose::sample(&mut rng);
        let source = render_identity(&source_spec, pose, 0.0, RENDER_NOISE, &mut rng);
        let spec = SwapMethodSpec::sample(method, &mut rng);
        let fake = toy_swap(&source, &source_spec, &target_spec, &spec, RENDER_NOISE, &mut rng).image;
        let dssim = dssim_map(&fake, &source.image)?;
        Ok(Scene {
            fake,
            source: source.image,
            dssim,
            anchors: build_anchors(&AnchorConfig::default())?,
        })
    }

    /// Pastes the most dissimilar `h x w` window of the fake onto the source.
    pub fn window_swap(&self, h: usize, w: usize, poisson: bool) -> caddm::Result<Swap> {
        let (ih, iw) = (self.fake.height(), self.fake.width());
        let win = select_window(&self.dssim, h, w)?;
        let mask = Mask::rectangle(ih, iw, win.y, win.x, win.h, win.w);
        let (image, blend) = if poisson && !win.touches_border(ih, iw) {
            (poisson_blend(&self.fake, &self.source, &mask)?, BlendKind::Poisson)
        } else {
            (alpha_blend(&self.fake, &self.source, &mask)?, BlendKind::Alpha)
        };
        Ok(Swap {
            image: rgba(&image),
            artifact_box: win.to_box().to_vec(),
            blend,
            global: false,
        })
    }

    pub fn draw(&self, draw: u64, global_probability: f64) -> caddm::Result<Swap> {
        let cfg = MfsConfig {
            global_probability,
            ..MfsConfig::default()
        };
        cfg.validate()?;
        let out = synthesize(&self.fake, &self.source, &cfg, &mut stream(draw, &[1]))?;
        Ok(Swap {
            image: rgba(&out.image),
            artifact_box: out.artifact_boxes.first().map(|b| b.to_vec()).unwrap_or_default(),
            blend: out.blend,
            global: out.bucket == GLOBAL_BUCKET,
        })
    }

    /// The `k` anchors closest to a pixel box as `[x0, y0, x1, y1, iou]`
    /// rows in pixels, best first.
    pub fn nearest_anchors(&self, bbox: [u32; 4], k: usize) -> caddm::Result<Vec<f64>> {
        let (h, w) = (self.fake.height(), self.fake.width());
        let g = normalize_box(bbox, h, w);
        let mut scored = Vec::with_capacity(self.anchors.len());
        for a in &self.anchors.anchors {
            let c = a.corners();
            scored.push((iou(&c, &g)?, c));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(scored
            .into_iter()
            .take(k)
            .flat_map(|(v, c)| [c[0] * w as f64, c[1] * h as f64, c[2] * w as f64, c[3] * h as f64, v])
            .collect())
    }
}

#[wasm_bindgen]
impl Scene {
    /// `method` is one of `splice_soft`, `splice_hard`, `color_shift`, `warp`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, method: &str) -> Result<Scene, JsError> {
        Scene::build(seed.into(), method).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.fake.width()
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.fake.height()
    }

    pub fn fake_rgba(&self) -> Vec<u8> {
        rgba(&self.fake)
    }

    pub fn source_rgba(&self) -> Vec<u8> {
        rgba(&self.source)
    }

    pub fn dssim_rgba(&self) -> Vec<u8> {
        heatmap(&self.dssim)
    }

    pub fn swap(&self, h: usize, w: usize, poisson: bool) -> Result<Swap, JsError> {
        self.window_swap(h, w, poisson).map_err(js_err)
    }

    pub fn random_swap(&self, draw: u32, global_probability: f64) -> Result<Swap, JsError> {
        self.draw(draw.into(), global_probability).map_err(js_err)
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn match_threshold() -> f64 {
        MATCH_IOU
    }

    pub fn match_box(&self, x0: u32, y0: u32, x1: u32, y1: u32, k: usize) -> Result<Vec<f64>, JsError> {
        self.nearest_anchors([x0, y0, x1, y1], k).map_err(js_err)
    }
}

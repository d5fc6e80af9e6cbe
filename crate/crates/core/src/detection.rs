//! Default anchors, IoU matching, offset coding and NMS.
//!
//! Boxes are in normalised image coordinates. Corner boxes are
//! `[x0, y0, x1, y1]`; centre boxes are `[cx, cy, w, h]`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An anchor is positive when its IoU with a ground-truth box exceeds this.
pub const MATCH_IOU: f64 = 0.9;
pub const NMS_IOU: f64 = 0.5;
pub const SCORE_THRESHOLD: f64 = 0.5;

pub type Corners = [f64; 4];
pub type CenterBox = [f64; 4];

pub fn to_corners(b: CenterBox) -> Corners {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn to_center(b: Corners) -> CenterBox {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

/// Pixel box `[x0, y0, x1, y1]` to normalised corners.
pub fn normalize_box(b: [u32; 4], height: usize, width: usize) -> Corners {
    [
        b[0] as f64 / width as f64,
        b[1] as f64 / height as f64,
        b[2] as f64 / width as f64,
        b[3] as f64 / height as f64,
    ]
}

/// Grid sizes, per-level scales and aspect ratios (`w / h`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub levels: Vec<usize>,
    /// One or more box scales per level (side of the square anchor).
    pub scales: Vec<Vec<f64>>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    /// Tuned so that roughly a third of MFS boxes on 112 px faces have an
    /// anchor above the 0.9 match threshold; the coarsest level is dense in
    /// scale because whole-face swaps are centred.
    fn default() -> Self {
        Self {
            levels: vec![7, 5, 3],
            scales: vec![
                vec![0.25, 0.35],
                vec![0.45, 0.55],
                vec![0.60, 0.64, 0.68, 0.72, 0.76, 0.80],
            ],
            ratios: vec![1.0, 1.12, 0.89, 1.25, 0.8, 1.4, 0.71, 2.0, 0.5],
        }
    }
}

impl AnchorConfig {
    pub fn variants_per_level(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.len() * self.ratios.len()).collect()
    }

    pub fn anchor_count(&self) -> usize {
        self.levels
            .iter()
            .zip(self.variants_per_level())
            .map(|(g, v)| g * g * v)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    /// `[cx, cy, w, h]`, clipped to the unit square.
    pub center: CenterBox,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub variant: usize,
}

impl Anchor {
    pub fn corners(&self) -> Corners {
        to_corners(self.center)
    }
}

/// Anchors ordered by level, then row, column and variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub config: AnchorConfig,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn build_anchors(config: &AnchorConfig) -> Result<AnchorSet> {
    if config.levels.is_empty() || config.levels.contains(&0) {
        return Err(Error::invalid("anchor grid sizes must be positive"));
    }
    if config.scales.len() != config.levels.len() {
        return Err(Error::invalid("need one scale list per anchor level"));
    }
    if config.ratios.is_empty() || config.ratios.iter().any(|r| *r <= 0.0) {
        return Err(Error::invalid("aspect ratios must be positive"));
    }
    let mut anchors = Vec::with_capacity(config.anchor_count());
    for (level, (&grid, scales)) in config.levels.iter().zip(&config.scales).enumerate() {
        for row in 0..grid {
            for col in 0..grid {
                let cx = (col as f64 + 0.5) / grid as f64;
                let cy = (row as f64 + 0.5) / grid as f64;
                let mut variant = 0;
                for &s in scales {
                    for &r in &config.ratios {
                        let raw = [cx, cy, s * r.sqrt(), s / r.sqrt()];
                        let c = to_corners(raw).map(|v| v.clamp(0.0, 1.0));
                        anchors.push(Anchor {
                            center: to_center(c),
                            level,
                            row,
                            col,
                            variant,
                        });
                        variant += 1;
                    }
                }
            }
        }
    }
    Ok(AnchorSet {
        anchors,
        config: config.clone(),
    })
}

fn area(b: &Corners) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// Intersection over union of two corner boxes.
pub fn iou(a: &Corners, b: &Corners) -> Result<f64> {
    if !(a[2] > a[0] && a[3] > a[1]) || !(b[2] > b[0] && b[3] > b[1]) {
        return Err(Error::invalid(format!("degenerate box {a:?} or {b:?}")));
    }
    Ok(iou_unchecked(a, b))
}

#[inline]
pub(crate) fn iou_unchecked(a: &Corners, b: &Corners) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

/// Regression target of ground truth `g` relative to default box `d`
/// (both centre form).
pub fn encode_offsets(g: &CenterBox, d: &CenterBox) -> [f64; 4] {
    [
        (g[0] - d[0]) / d[2],
        (g[1] - d[1]) / d[3],
        (g[2] / d[2]).ln(),
        (g[3] / d[3]).ln(),
    ]
}

/// Inverse of [`encode_offsets`]; returns corners.
pub fn decode_offsets(d: &CenterBox, o: &[f64; 4]) -> Corners {
    to_corners([
        d[0] + o[0] * d[2],
        d[1] + o[1] * d[3],
        d[2] * o[2].exp(),
        d[3] * o[3].exp(),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorMatch {
    pub gt_index: usize,
    pub iou: f64,
    pub offsets: [f64; 4],
}

/// Per-anchor targets. `matches[i]` is `Some` exactly for positives.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub matches: Vec<Option<AnchorMatch>>,
}

impl DetectionTargets {
    pub fn negatives(n: usize) -> Self {
        Self { matches: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.matches[i].is_some()
    }

    /// Class target per anchor: 1 for fake (positive), 0 for genuine.
    pub fn class_target(&self, i: usize) -> usize {
        usize::from(self.is_positive(i))
    }

    pub fn n_positives(&self) -> usize {
        self.matches.iter().filter(|m| m.is_some()).count()
    }

    pub fn positive_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.matches.iter().enumerate().filter_map(|(i, m)| m.map(|_| i))
    }
}

/// Marks anchors whose best IoU with any ground-truth box exceeds
/// [`MATCH_IOU`] and records their offset targets.
pub fn match_anchors(anchors: &AnchorSet, gt_boxes: &[Corners]) -> Result<DetectionTargets> {
    for g in gt_boxes {
        if !(g[2] > g[0] && g[3] > g[1]) {
            return Err(Error::invalid(format!("degenerate ground-truth box {g:?}")));
        }
    }
    let gt_centers: Vec<CenterBox> = gt_boxes.iter().map(|g| to_center(*g)).collect();
    let matches = anchors
        .anchors
        .iter()
        .map(|a| {
            let corners = a.corners();
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt_boxes.iter().enumerate() {
                let v = iou_unchecked(&corners, g);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.filter(|(_, v)| *v > MATCH_IOU).map(|(j, v)| AnchorMatch {
                gt_index: j,
                iou: v,
                offsets: encode_offsets(&gt_centers[j], &a.center),
            })
        })
        .collect();
    Ok(DetectionTargets { matches })
}

/// Greedy NMS; returns kept indices in descending score order. Equal
/// scores keep the lower index first.
pub fn nms(boxes: &[Corners], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} scores", boxes.len()),
            actual: format!("{} scores", scores.len()),
        });
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou_unchecked(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Highest-scoring box surviving NMS, or `None` when its score is below
/// `score_threshold`.
pub fn top_detection(
    boxes: &[Corners],
    scores: &[f64],
    iou_threshold: f64,
    score_threshold: f64,
) -> Result<Option<usize>> {
    let keep = nms(boxes, scores, iou_threshold)?;
    Ok(keep.first().copied().filter(|&i| scores[i] >= score_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_box(rng: &mut crate::rng::Rng) -> Corners {
        let x0: f64 = rng.random_range(0.0..0.8);
        let y0: f64 = rng.random_range(0.0..0.8);
        [
            x0,
            y0,
            x0 + rng.random_range(0.05..0.2),
            y0 + rng.random_range(0.05..0.2),
        ]
    }

    #[test]
    fn single_centered_anchor() {
        let cfg = AnchorConfig {
            levels: vec![1],
            scales: vec![vec![0.5]],
            ratios: vec![1.0],
        };
        let set = build_anchors(&cfg).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.anchors[0].center, [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn spec_style_defaults_count() {
        let cfg = AnchorConfig {
            levels: vec![7, 5, 3],
            scales: vec![vec![0.25], vec![0.45], vec![0.70]],
            ratios: vec![1.0, 2.0, 0.5],
        };
        assert_eq!(build_anchors(&cfg).unwrap().len(), 3 * (49 + 25 + 9));
        let tuned = build_anchors(&AnchorConfig::default()).unwrap();
        assert_eq!(tuned.len(), 9 * (2 * 49 + 2 * 25 + 6 * 9));
    }

    #[test]
    fn cell_centers() {
        let set = build_anchors(&AnchorConfig::default()).unwrap();
        assert_eq!(set.len(), AnchorConfig::default().anchor_count());
        for a in &set.anchors {
            let grid = set.config.levels[a.level] as f64;
            let c = a.corners();
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            // Clipping moves centres of border anchors; unclipped ones sit on the cell centre.
            let raw_w = c[2] - c[0];
            if c[0] > 0.0 && c[2] < 1.0 && raw_w > 0.0 {
                assert!((a.center[0] - (a.col as f64 + 0.5) / grid).abs() < 1e-12);
            }
            if c[1] > 0.0 && c[3] < 1.0 {
                assert!((a.center[1] - (a.row as f64 + 0.5) / grid).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn iou_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[3.0, 3.0, 4.0, 4.0]).unwrap(), 0.0);
        assert!((iou(&a, &[1.0, 1.0, 3.0, 3.0]).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!(iou(&a, &[1.0, 1.0, 1.0, 3.0]).is_err());
    }

    #[test]
    fn identical_gt_has_zero_offsets() {
        let set = build_anchors(&AnchorConfig::default()).unwrap();
        let target = set.anchors[100];
        let t = match_anchors(&set, &[target.corners()]).unwrap();
        let m = t.matches[100].unwrap();
        for o in m.offsets {
            assert!(o.abs() < 1e-12);
        }
        assert!(t.n_positives() >= 1);
    }

    #[test]
    fn no_gt_all_negative() {
        let set = build_anchors(&AnchorConfig::default()).unwrap();
        let t = match_anchors(&set, &[]).unwrap();
        assert_eq!(t.n_positives(), 0);
        assert_eq!(t.len(), set.len());
    }

    #[test]
    fn matching_equals_brute_force() {
        let mut rng = stream(21, &[]);
        for trial in 0..20 {
            // 200 random anchors; half of the ground truth sits near an anchor.
            let anchors: Vec<Anchor> = (0..200)
                .map(|_| {
                    let b = random_box(&mut rng);
                    Anchor {
                        center: to_center(b),
                        level: 0,
                        row: 0,
                        col: 0,
                        variant: 0,
                    }
                })
                .collect();
            let set = AnchorSet {
                anchors: anchors.clone(),
                config: AnchorConfig::default(),
            };
            let gts: Vec<Corners> = (0..5)
                .map(|k| {
                    if k % 2 == 0 {
                        let a = anchors[rng.random_range(0..200)].corners();
                        let j = 0.005 * (trial as f64 % 3.0);
                        [a[0] + j, a[1], a[2] + j, a[3]]
                    } else {
                        random_box(&mut rng)
                    }
                })
                .collect();
            let got = match_anchors(&set, &gts).unwrap();
            for (i, a) in anchors.iter().enumerate() {
                let ac = a.corners();
                let mut best_j = usize::MAX;
                let mut best = -1.0;
                for (j, g) in gts.iter().enumerate() {
                    let iw = (ac[2].min(g[2]) - ac[0].max(g[0])).max(0.0);
                    let ih = (ac[3].min(g[3]) - ac[1].max(g[1])).max(0.0);
                    let inter = iw * ih;
                    let union = (ac[2] - ac[0]) * (ac[3] - ac[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter;
                    let v = inter / union;
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                match got.matches[i] {
                    Some(m) => {
                        assert!(best > 0.9);
                        assert_eq!(m.gt_index, best_j);
                        let g = to_center(gts[best_j]);
                        let d = a.center;
                        let want = [
                            (g[0] - d[0]) / d[2],
                            (g[1] - d[1]) / d[3],
                            (g[2] / d[2]).ln(),
                            (g[3] / d[3]).ln(),
                        ];
                        assert_eq!(m.offsets, want);
                    }
                    None => assert!(best <= 0.9),
                }
            }
        }
    }

    #[test]
    fn decode_basics() {
        let d = [0.5, 0.5, 0.2, 0.4];
        assert_eq!(decode_offsets(&d, &[0.0; 4]), to_corners(d));
        let wide = to_center(decode_offsets(&d, &[0.0, 0.0, 2f64.ln(), 0.0]));
        assert!((wide[2] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = stream(22, &[]);
        let mut worst = 0.0_f64;
        for _ in 0..1000 {
            let g = random_box(&mut rng);
            let d = to_center(random_box(&mut rng));
            let back = decode_offsets(&d, &encode_offsets(&to_center(g), &d));
            for k in 0..4 {
                worst = worst.max((back[k] - g[k]).abs());
            }
        }
        assert!(worst < 1e-9, "{worst}");
    }

    fn reference_nms(boxes: &[Corners], scores: &[f64], thr: f64) -> Vec<usize> {
        let mut alive: Vec<usize> = (0..boxes.len()).collect();
        let mut keep = Vec::new();
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                    best = i;
                }
            }
            keep.push(best);
            alive.retain(|&i| i != best && iou(&boxes[i], &boxes[best]).unwrap() <= thr);
        }
        keep
    }

    #[test]
    fn nms_cases() {
        let b = [0.1, 0.1, 0.3, 0.3];
        assert_eq!(nms(&[b], &[0.4], 0.5).unwrap(), vec![0]);
        assert_eq!(nms(&[b, b], &[0.9, 0.8], 0.5).unwrap(), vec![0]);
        assert!(nms(&[b], &[], 0.5).is_err());
        assert_eq!(top_detection(&[b, b], &[0.4, 0.3], 0.5, 0.5).unwrap(), None);
        assert_eq!(top_detection(&[b, b], &[0.4, 0.7], 0.5, 0.5).unwrap(), Some(1));
    }

    #[test]
    fn nms_matches_reference() {
        let mut rng = stream(23, &[]);
        for _ in 0..20 {
            let boxes: Vec<Corners> = (0..50).map(|_| random_box(&mut rng)).collect();
            let scores: Vec<f64> = (0..50).map(|_| rng.random()).collect();
            assert_eq!(nms(&boxes, &scores, 0.3).unwrap(), reference_nms(&boxes, &scores, 0.3));
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(
            a in (0.0..0.5f64, 0.0..0.5f64, 0.01..0.5f64, 0.01..0.5f64),
            b in (0.0..0.5f64, 0.0..0.5f64, 0.01..0.5f64, 0.01..0.5f64),
        ) {
            let a = [a.0, a.1, a.0 + a.2, a.1 + a.3];
            let b = [b.0, b.1, b.0 + b.2, b.1 + b.3];
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn adding_gt_never_removes_positives(seed in 0u64..500) {
            let set = build_anchors(&AnchorConfig::default()).unwrap();
            let mut rng = stream(seed, &[]);
            let mut gts = vec![set.anchors[rng.random_range(0..set.len())].corners()];
            let before = match_anchors(&set, &gts).unwrap();
            gts.push(set.anchors[rng.random_range(0..set.len())].corners());
            gts.push(random_box(&mut rng));
            let after = match_anchors(&set, &gts).unwrap();
            for i in 0..set.len() {
                if before.is_positive(i) {
                    prop_assert!(after.is_positive(i));
                }
            }
        }
    }
}

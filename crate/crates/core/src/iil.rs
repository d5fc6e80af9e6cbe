//! Identity-leakage diagnostics on pre-classifier features.
//!
//! Two measurements: how many identities' PCA rectangles overlap each
//! other, and how well a linear softmax probe recovers identity from
//! L2-normalised features. A detector that encodes identity shows fewer
//! overlaps and a more accurate probe.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::mfs::Label;
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub feature: Vec<f64>,
    pub identity: String,
    pub label: Label,
}

/// On-disk form: the vector is base64 of little-endian f32.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureLine {
    feature: String,
    dim: usize,
    identity: String,
    label: Label,
}

pub fn write_features(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        let bytes: Vec<u8> = r.feature.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        let line = FeatureLine {
            feature: B64.encode(bytes),
            dim: r.feature.len(),
            identity: r.identity.clone(),
            label: r.label,
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<FeatureRecord> = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::invalid(format!("{}:{}: {m}", path.display(), n + 1));
        let l: FeatureLine = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let bytes = B64.decode(l.feature.as_bytes()).map_err(|e| at(e.to_string()))?;
        if bytes.len() != 4 * l.dim {
            return Err(at(format!("expected {} floats, found {} bytes", l.dim, bytes.len())));
        }
        let feature: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(at("non-finite feature value".into()));
        }
        if let Some(first) = out.first() {
            if first.feature.len() != feature.len() {
                return Err(at(format!(
                    "dimension {} differs from {}",
                    feature.len(),
                    first.feature.len()
                )));
            }
        }
        out.push(FeatureRecord {
            feature,
            identity: l.identity,
            label: l.label,
        });
    }
    Ok(out)
}

/// Up to `k` records per identity at equal intervals, in input order.
pub fn sample_per_identity(records: &[FeatureRecord], k: usize) -> Vec<FeatureRecord> {
    let groups = group_indices(records);
    let mut picked: Vec<usize> = groups
        .values()
        .flat_map(|idx| {
            crate::metrics::equal_interval_indices(idx.len(), k)
                .into_iter()
                .map(|i| idx[i])
        })
        .collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

fn group_indices(records: &[FeatureRecord]) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.identity.clone()).or_default().push(i);
    }
    groups
}

fn check_features(records: &[FeatureRecord]) -> Result<usize> {
    let dim = records.first().map(|r| r.feature.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::invalid("no features"));
    }
    for r in records {
        if r.feature.len() != dim {
            return Err(Error::invalid(format!(
                "feature dimension {} differs from {dim}",
                r.feature.len()
            )));
        }
        if r.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature for identity {}",
                r.identity
            )));
        }
    }
    Ok(dim)
}

/// Top-two principal axes of the mean-centred rows, each flipped so its
/// largest-magnitude component is positive.
pub fn principal_axes(rows: &[Vec<f64>]) -> Result<[Vec<f64>; 2]> {
    let n = rows.len();
    let d = rows.first().map(Vec::len).unwrap_or(0);
    if n < 2 || d < 2 {
        return Err(Error::invalid("PCA needs at least two samples of dimension two"));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let axis = |k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = match order.get(k) {
            Some(&r) => v_t.row(r).iter().copied().collect(),
            None => vec![0.0; d],
        };
        fix_sign(&mut v);
        v
    };
    Ok([axis(0), axis(1)])
}

/// Flips `v` so that its largest-magnitude entry (first on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects mean-centred rows onto the top-two principal axes.
pub fn pca_project(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let axes = principal_axes(rows)?;
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    Ok(rows
        .iter()
        .map(|r| {
            let dot = |a: &[f64]| r.iter().zip(&mean).zip(a).map(|((x, m), w)| (x - m) * w).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect())
}

/// Axis-aligned `[x0, y0, x1, y1]` around 2-D points.
pub fn bounding_rectangle(points: &[[f64; 2]]) -> [f64; 4] {
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in points {
        r[0] = r[0].min(p[0]);
        r[1] = r[1].min(p[1]);
        r[2] = r[2].max(p[0]);
        r[3] = r[3].max(p[1]);
    }
    r
}

/// Rectangle IoU; two identical zero-area rectangles count as 1.
pub fn rectangle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    /// Every image of the identity.
    #[default]
    All,
    /// Genuine images only.
    GenuineOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    /// Linear-interpolation quantiles of `values`.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if v.is_empty() {
                return f64::NAN;
            }
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            min: q(0.0),
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: q(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapDistribution {
    pub threshold: f64,
    pub identities: Vec<String>,
    /// Per identity, how many other identities' rectangles reach the threshold.
    pub counts: Vec<usize>,
    pub quartiles: Quartiles,
}

/// Per-identity rectangles in the shared 2-D PCA space.
pub fn identity_rectangles(features: &[FeatureRecord], mode: RegionMode) -> Result<Vec<(String, [f64; 4])>> {
    let used: Vec<&FeatureRecord> = features
        .iter()
        .filter(|r| mode == RegionMode::All || r.label == Label::Genuine)
        .collect();
    let owned: Vec<FeatureRecord> = used.iter().map(|r| (*r).clone()).collect();
    check_features(&owned)?;
    let groups = group_indices(&owned);
    if groups.len() < 2 {
        return Err(Error::invalid(format!(
            "identity overlap needs at least 2 identities, got {}",
            groups.len()
        )));
    }
    for (id, idx) in &groups {
        if idx.len() < 2 {
            return Err(Error::invalid(format!(
                "identity {id} has {} point(s); a rectangle needs at least 2",
                idx.len()
            )));
        }
    }
    let rows: Vec<Vec<f64>> = owned.iter().map(|r| r.feature.clone()).collect();
    let proj = pca_project(&rows)?;
    Ok(groups
        .into_iter()
        .map(|(id, idx)| {
            let pts: Vec<[f64; 2]> = idx.iter().map(|&i| proj[i]).collect();
            (id, bounding_rectangle(&pts))
        })
        .collect())
}

/// Overlap counts per identity at each threshold (pair overlaps iff
/// rectangle IoU >= threshold).
pub fn id_overlap(
    features: &[FeatureRecord],
    thresholds: &[f64],
    mode: RegionMode,
) -> Result<Vec<OverlapDistribution>> {
    let rects = identity_rectangles(features, mode)?;
    let n = rects.len();
    let mut iou = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            iou[i][j] = rectangle_iou(&rects[i].1, &rects[j].1);
        }
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let counts: Vec<usize> = (0..n)
                .map(|i| (0..n).filter(|&j| j != i && iou[i][j] >= t).count())
                .collect();
            let as_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            OverlapDistribution {
                threshold: t,
                identities: rects.iter().map(|r| r.0.clone()).collect(),
                quartiles: Quartiles::of(&as_f),
                counts,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n_identities: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Train loss before each update, then after the last one.
    pub train_loss: Vec<f64>,
    /// Held-out accuracy after each epoch.
    pub test_accuracy: Vec<f64>,
    pub final_accuracy: f64,
}

pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// Per-identity shuffled split; every identity with at least two samples
/// contributes at least one held-out sample.
pub fn stratified_split(records: &[FeatureRecord], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, idx) in group_indices(records).into_values().enumerate() {
        let mut idx = idx;
        idx.shuffle(&mut stream(seed, &[k as u64]));
        let n = idx.len();
        let mut n_test = ((1.0 - train_fraction) * n as f64).round() as usize;
        if n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        } else {
            n_test = 0;
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Softmax regression on identity labels with full-batch gradient descent
/// from zero weights.
pub fn id_linear_probe(features: &[FeatureRecord], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let d = check_features(features)?;
    let ids: Vec<String> = group_indices(features).into_keys().collect();
    let k = ids.len();
    if k < 2 {
        return Err(Error::invalid(format!(
            "identity probe needs at least 2 identities, got {k}"
        )));
    }
    if !(cfg.lr > 0.0) || !(0.0 < cfg.train_fraction && cfg.train_fraction < 1.0) {
        return Err(Error::invalid("probe needs lr > 0 and train_fraction in (0, 1)"));
    }
    let x: Vec<Vec<f64>> = features.iter().map(|r| l2_normalize(&r.feature)).collect();
    let y: Vec<usize> = features
        .iter()
        .map(|r| ids.binary_search(&r.identity).expect("identity indexed"))
        .collect();
    let (train, test) = stratified_split(features, cfg.train_fraction, cfg.seed);
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];

    let logits = |w: &[f64], b: &[f64], xi: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(xi).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    };
    let softmax = |z: &[f64]| -> Vec<f64> {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let loss_and_grad = |w: &[f64], b: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let mut loss = 0.0;
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for &i in &train {
            let p = softmax(&logits(w, b, &x[i]));
            loss -= p[y[i]].max(f64::MIN_POSITIVE).ln();
            for c in 0..k {
                let g = p[c] - if c == y[i] { 1.0 } else { 0.0 };
                gb[c] += g;
                for (gv, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(&x[i]) {
                    *gv += g * xv;
                }
            }
        }
        let n = train.len().max(1) as f64;
        gw.iter_mut().for_each(|v| *v /= n);
        gb.iter_mut().for_each(|v| *v /= n);
        (loss / n, gw, gb)
    };
    let accuracy = |w: &[f64], b: &[f64]| -> f64 {
        if test.is_empty() {
            return 0.0;
        }
        let correct = test
            .iter()
            .filter(|&&i| {
                let z = logits(w, b, &x[i]);
                let mut best = 0;
                for c in 1..k {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                best == y[i]
            })
            .count();
        correct as f64 / test.len() as f64
    };

    let mut train_loss = Vec::with_capacity(cfg.epochs + 1);
    let mut test_accuracy = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (loss, gw, gb) = loss_and_grad(&w, &b);
        train_loss.push(loss);
        for (v, g) in w.iter_mut().zip(&gw) {
            *v -= cfg.lr * g;
        }
        for (v, g) in b.iter_mut().zip(&gb) {
            *v -= cfg.lr * g;
        }
        test_accuracy.push(accuracy(&w, &b));
    }
    train_loss.push(loss_and_grad(&w, &b).0);
    Ok(ProbeReport {
        n_identities: k,
        n_train: train.len(),
        n_test: test.len(),
        final_accuracy: test_accuracy.last().copied().unwrap_or_else(|| accuracy(&w, &b)),
        train_loss,
        test_accuracy,
    })
}

//! Accuracy, frame-level AUC and video-level AUC.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Frames sampled per video for video-level scoring.
pub const FRAMES_PER_VIDEO: usize = 32;

/// One scored frame. `score` is the fake-class probability; `label` is 1
/// for fake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub score: f64,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
}

impl EvalRecord {
    pub fn new(score: f64, label: u8, group_id: Option<String>) -> Self {
        Self { score, label, group_id }
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from mid-ranks in `O(n log n)`.
pub fn roc_auc(records: &[EvalRecord]) -> Result<f64> {
    let n_pos = records.iter().filter(|r| r.label == 1).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {}", r.score)));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].score == records[order[i]].score {
            j += 1;
        }
        // 1-based mid-rank of the tie block i..=j.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if records[k].label == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Indices of up to `k` equally spaced frames out of `n`.
pub fn equal_interval_indices(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        (0..k).map(|i| i * n / k).collect()
    }
}

/// Collapses frames into one record per group: the mean score of up to
/// `frames_per_group` equally spaced frames. Groups keep first-seen order;
/// records without a group id stand alone.
pub fn video_level_scores(records: &[EvalRecord], frames_per_group: usize) -> Result<Vec<EvalRecord>> {
    let mut order: Vec<Option<String>> = Vec::new();
    let mut members: HashMap<Option<String>, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = match &r.group_id {
            Some(g) => Some(g.clone()),
            None => Some(format!("\u{0}frame-{i}")),
        };
        members
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key.clone());
                Vec::new()
            })
            .push(i);
    }
    order
        .into_iter()
        .map(|key| {
            let idx = &members[&key];
            let label = records[idx[0]].label;
            if idx.iter().any(|&i| records[i].label != label) {
                return Err(Error::invalid(format!(
                    "group {:?} mixes labels",
                    records[idx[0]].group_id
                )));
            }
            let picks = equal_interval_indices(idx.len(), frames_per_group);
            let score = picks.iter().map(|&p| records[idx[p]].score).sum::<f64>() / picks.len() as f64;
            Ok(EvalRecord {
                score,
                label,
                group_id: records[idx[0]].group_id.clone(),
            })
        })
        .collect()
}

/// Fraction of records where `score >= threshold` agrees with the label.
pub fn accuracy(records: &[EvalRecord], threshold: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let correct = records
        .iter()
        .filter(|r| (r.score >= threshold) == (r.label == 1))
        .count();
    correct as f64 / records.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub frame_auc: Option<f64>,
    pub video_auc: Option<f64>,
    pub n: usize,
}

/// ACC at 0.5 plus frame and video AUC (absent when a class is missing).
pub fn evaluate(records: &[EvalRecord]) -> Result<Metrics> {
    let videos = video_level_scores(records, FRAMES_PER_VIDEO)?;
    Ok(Metrics {
        acc: accuracy(records, 0.5),
        frame_auc: roc_auc(records).ok(),
        video_auc: roc_auc(&videos).ok(),
        n: records.len(),
    })
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalRecord =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !(0.0..=1.0).contains(&r.score) || r.label > 1 {
            return Err(Error::invalid(format!(
                "{}:{}: score must be in [0, 1] and label in {{0, 1}}",
                path.display(),
                n + 1
            )));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn recs(scores: &[f64], labels: &[u8]) -> Vec<EvalRecord> {
        scores
            .iter()
            .zip(labels)
            .map(|(s, l)| EvalRecord::new(*s, *l, None))
            .collect()
    }

    fn pair_count(r: &[EvalRecord]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for p in r.iter().filter(|r| r.label == 1) {
            for n in r.iter().filter(|r| r.label == 0) {
                den += 1.0;
                if p.score > n.score {
                    num += 1.0;
                } else if p.score == n.score {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_basics() {
        assert_eq!(roc_auc(&recs(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&recs(&[0.5; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
        assert!(matches!(roc_auc(&recs(&[0.1, 0.2], &[1, 1])), Err(Error::Undefined(_))));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = stream(51, &[]);
        for _ in 0..10 {
            // Coarse scores force plenty of ties.
            let r: Vec<EvalRecord> = (0..200)
                .map(|_| EvalRecord::new((rng.random_range(0..20) as f64) / 20.0, rng.random_range(0..2), None))
                .collect();
            assert!((roc_auc(&r).unwrap() - pair_count(&r)).abs() < 1e-12);
        }
    }

    #[test]
    fn video_scores() {
        let single = vec![EvalRecord::new(0.3, 1, Some("v".into()))];
        assert_eq!(video_level_scores(&single, 32).unwrap()[0].score, 0.3);
        let constant: Vec<_> = (0..10).map(|_| EvalRecord::new(0.7, 0, Some("v".into()))).collect();
        assert!((video_level_scores(&constant, 32).unwrap()[0].score - 0.7).abs() < 1e-15);
        assert_eq!(
            equal_interval_indices(64, 32),
            (0..32).map(|i| 2 * i).collect::<Vec<_>>()
        );
        // 64 frames scored by index: the mean of the even indices is 31.
        let long: Vec<_> = (0..64)
            .map(|i| EvalRecord::new(i as f64, 1, Some("v".into())))
            .collect();
        assert_eq!(video_level_scores(&long, 32).unwrap()[0].score, 31.0);
        let mixed = vec![
            EvalRecord::new(0.1, 0, Some("v".into())),
            EvalRecord::new(0.1, 1, Some("v".into())),
        ];
        assert!(video_level_scores(&mixed, 32).is_err());
    }

    #[test]
    fn accuracy_rules() {
        assert_eq!(accuracy(&recs(&[0.9, 0.1], &[1, 0]), 0.5), 1.0);
        assert_eq!(accuracy(&recs(&[0.5], &[1]), 0.5), 1.0);
        assert_eq!(accuracy(&recs(&[0.5], &[0]), 0.5), 0.0);
        let mut rng = stream(52, &[]);
        let r: Vec<EvalRecord> = (0..100)
            .map(|_| EvalRecord::new(rng.random(), rng.random_range(0..2), None))
            .collect();
        let mut correct = 0;
        for x in &r {
            let predicted_fake = x.score >= 0.5;
            if predicted_fake == (x.label == 1) {
                correct += 1;
            }
        }
        assert_eq!(accuracy(&r, 0.5), correct as f64 / 100.0);
    }

    #[test]
    fn evaluate_json_shape() {
        let m = evaluate(&recs(&[0.1, 0.9], &[0, 1])).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"acc":1.0,"frame_auc":1.0,"video_auc":1.0,"n":2}"#);
    }

    proptest! {
        #[test]
        fn auc_invariances(
            scores in proptest::collection::vec(0.0..1.0f64, 2..60),
            flips in proptest::collection::vec(0u8..2, 60),
        ) {
            let mut labels: Vec<u8> = flips[..scores.len()].to_vec();
            labels[0] = 0;
            labels[1] = 1;
            let r = recs(&scores, &labels);
            let base = roc_auc(&r).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
            prop_assert!((roc_auc(&recs(&transformed, &labels)).unwrap() - base).abs() < 1e-12);
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            prop_assert!((roc_auc(&recs(&scores, &flipped)).unwrap() - (1.0 - base)).abs() < 1e-12);
        }
    }
}

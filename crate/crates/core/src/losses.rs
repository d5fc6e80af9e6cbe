//! Training objective: `L = beta * L_det + L_cls`, with
//! `L_det = (L_conf + alpha * L_loc) / N` over `N` positive anchors.
//!
//! Every loss returns its gradient with respect to its inputs so the
//! network can backpropagate without an autodiff layer.

use serde::{Deserialize, Serialize};

use crate::detection::DetectionTargets;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.1;
/// Negatives kept per positive anchor by hard-negative mining.
pub const NEGATIVE_RATIO: usize = 3;
/// Negatives kept for an image without positives.
pub const NEGATIVES_WITHOUT_POSITIVES: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub conf: f64,
    pub loc: f64,
    pub det: f64,
    pub n_positives: usize,
    pub n_mined_negatives: usize,
}

/// `log(sum(exp(x)))` of a 2-vector.
#[inline]
fn log_sum_exp(l: &[f64; 2]) -> f64 {
    let m = l[0].max(l[1]);
    m + ((l[0] - m).exp() + (l[1] - m).exp()).ln()
}

#[inline]
pub fn softmax2(l: &[f64; 2]) -> [f64; 2] {
    let lse = log_sum_exp(l);
    [(l[0] - lse).exp(), (l[1] - lse).exp()]
}

/// Softmax cross-entropy and its gradient.
pub fn cross_entropy(logits: &[f64; 2], class: usize) -> (f64, [f64; 2]) {
    // softplus(l_other - l_class), accurate for confident predictions.
    let z = logits[1 - class] - logits[class];
    let loss = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    let mut grad = softmax2(logits);
    grad[class] -= 1.0;
    (loss, grad)
}

/// Image-level softmax cross-entropy (genuine = 0, fake = 1).
pub fn classification_loss(logits: &[f64; 2], label: usize) -> (f64, [f64; 2]) {
    cross_entropy(logits, label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceLoss {
    pub loss: f64,
    /// Gradient per anchor; zero for anchors that were not selected.
    pub grad: Vec<[f64; 2]>,
    pub n_positives: usize,
    pub n_mined_negatives: usize,
}

/// Anchor confidence loss over all positives and the hardest negatives
/// (three per positive, or 48 when the image has no positives).
pub fn confidence_loss(logits: &[[f64; 2]], targets: &DetectionTargets) -> ConfidenceLoss {
    assert_eq!(logits.len(), targets.len(), "one logit pair per anchor");
    let mut grad = vec![[0.0; 2]; logits.len()];
    let mut loss = 0.0;
    let mut negatives = Vec::new();
    let mut n_pos = 0;
    for (i, l) in logits.iter().enumerate() {
        if targets.is_positive(i) {
            let (v, g) = cross_entropy(l, 1);
            loss += v;
            grad[i] = g;
            n_pos += 1;
        } else {
            negatives.push((log_sum_exp(l) - l[0], i));
        }
    }
    let quota = if n_pos == 0 {
        NEGATIVES_WITHOUT_POSITIVES
    } else {
        NEGATIVE_RATIO * n_pos
    };
    negatives.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    negatives.truncate(quota);
    for &(v, i) in &negatives {
        loss += v;
        grad[i] = cross_entropy(&logits[i], 0).1;
    }
    ConfidenceLoss {
        loss,
        grad,
        n_positives: n_pos,
        n_mined_negatives: negatives.len(),
    }
}

#[inline]
pub fn smooth_l1(z: f64) -> f64 {
    if z.abs() < 1.0 {
        0.5 * z * z
    } else {
        z.abs() - 0.5
    }
}

#[inline]
fn smooth_l1_grad(z: f64) -> f64 {
    if z.abs() < 1.0 {
        z
    } else {
        z.signum()
    }
}

/// Smooth-L1 between predicted and target offsets, summed over positive
/// anchors and the four coordinates. `pred` holds one entry per anchor.
pub fn location_loss(pred: &[[f64; 4]], targets: &DetectionTargets) -> (f64, Vec<[f64; 4]>) {
    assert_eq!(pred.len(), targets.len(), "one offset vector per anchor");
    let mut grad = vec![[0.0; 4]; pred.len()];
    let mut loss = 0.0;
    for i in targets.positive_indices() {
        let t = targets.matches[i].expect("positive").offsets;
        for m in 0..4 {
            let z = pred[i][m] - t[m];
            loss += smooth_l1(z);
            grad[i][m] = smooth_l1_grad(z);
        }
    }
    (loss, grad)
}

/// Combines the pieces. With no positives the confidence term is normalised
/// by the number of mined negatives and the location term is dropped.
pub fn total_loss(
    cls: f64,
    conf: f64,
    loc: f64,
    n_positives: usize,
    n_mined_negatives: usize,
    weights: LossWeights,
) -> LossBreakdown {
    let det = if n_positives > 0 {
        (conf + weights.alpha * loc) / n_positives as f64
    } else {
        conf / n_mined_negatives.max(1) as f64
    };
    LossBreakdown {
        total: weights.beta * det + cls,
        cls,
        conf,
        loc,
        det,
        n_positives,
        n_mined_negatives,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::AnchorMatch;
    use crate::rng::stream;
    use rand::Rng as _;

    fn targets(pos: &[usize], n: usize) -> DetectionTargets {
        let mut t = DetectionTargets::negatives(n);
        for &i in pos {
            t.matches[i] = Some(AnchorMatch {
                gt_index: 0,
                iou: 0.95,
                offsets: [0.1, -0.2, 0.05, 0.3],
            });
        }
        t
    }

    #[test]
    fn classification_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((classification_loss(&[0.0, 0.0], 0).0 - ln2).abs() < 1e-15);
        assert!((classification_loss(&[0.0, 0.0], 1).0 - ln2).abs() < 1e-15);
        let v = classification_loss(&[10.0, -10.0], 0).0;
        let direct = (-20f64).exp().ln_1p();
        assert!((v - direct).abs() < 1e-12 * direct);
        assert!((v - 2.06e-9).abs() < 0.01e-9);
        let mut prev = f64::INFINITY;
        for k in -10..10 {
            let l = classification_loss(&[0.3, k as f64 * 0.5], 1).0;
            assert!(l < prev && l > 0.0);
            prev = l;
        }
    }

    #[test]
    fn confidence_uniform_logits() {
        let t = targets(&[2], 10);
        let c = confidence_loss(&[[0.5, 0.5]; 10], &t);
        assert_eq!(c.n_positives, 1);
        assert_eq!(c.n_mined_negatives, 3);
        assert!((c.loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confidence_no_positives_mines_48() {
        let t = targets(&[], 100);
        let c = confidence_loss(&vec![[0.0, 0.0]; 100], &t);
        assert_eq!(c.n_mined_negatives, 48);
        let t = targets(&[], 20);
        assert_eq!(confidence_loss(&vec![[0.0, 0.0]; 20], &t).n_mined_negatives, 20);
    }

    #[test]
    fn confidence_perfect_logits() {
        let t = targets(&[0, 5], 30);
        let logits: Vec<[f64; 2]> = (0..30)
            .map(|i| if t.is_positive(i) { [-10.0, 10.0] } else { [10.0, -10.0] })
            .collect();
        assert!(confidence_loss(&logits, &t).loss < 1e-6);
    }

    #[test]
    fn confidence_mines_hardest() {
        let t = targets(&[0], 6);
        let logits = vec![[0.0, 0.0], [0.0, 3.0], [0.0, -3.0], [0.0, 2.0], [0.0, 1.0], [0.0, -1.0]];
        let c = confidence_loss(&logits, &t);
        let selected: Vec<usize> = (1..6).filter(|&i| c.grad[i] != [0.0, 0.0]).collect();
        assert_eq!(selected, vec![1, 3, 4]);
    }

    #[test]
    fn confidence_gradient_matches_finite_differences() {
        let mut rng = stream(31, &[]);
        let t = targets(&[1, 7], 20);
        let logits: Vec<[f64; 2]> = (0..20)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let base = confidence_loss(&logits, &t);
        let eps = 1e-4;
        for i in 0..20 {
            for k in 0..2 {
                let mut plus = logits.clone();
                plus[i][k] += eps;
                let mut minus = logits.clone();
                minus[i][k] -= eps;
                let fd = (confidence_loss(&plus, &t).loss - confidence_loss(&minus, &t).loss) / (2.0 * eps);
                let an = base.grad[i][k];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4 || (fd - an).abs() < 1e-9,
                    "anchor {i} logit {k}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn location_examples() {
        let t = targets(&[0], 3);
        let target = t.matches[0].unwrap().offsets;
        let mut pred = vec![[0.0; 4]; 3];
        pred[0] = target;
        assert_eq!(location_loss(&pred, &t).0, 0.0);
        pred[0][2] += 2.0;
        assert!((location_loss(&pred, &t).0 - 1.5).abs() < 1e-12);
        pred[0] = target;
        pred[0][1] += 0.5;
        assert!((location_loss(&pred, &t).0 - 0.125).abs() < 1e-12);
        // Negatives never contribute.
        pred[1] = [9.0; 4];
        assert!((location_loss(&pred, &t).0 - 0.125).abs() < 1e-12);
        assert_eq!(location_loss(&pred, &targets(&[], 3)).0, 0.0);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let b = total_loss(0.5, 2.0, 3.0, 1, 3, w);
        assert!((b.det - 5.0).abs() < 1e-12);
        assert!((b.total - 1.0).abs() < 1e-12);
        let b0 = total_loss(0.5, 2.0, 3.0, 1, 3, LossWeights { alpha: 1.0, beta: 0.0 });
        assert_eq!(b0.total, 0.5);
        let n0a = total_loss(0.5, 2.0, 0.0, 0, 48, w);
        let n0b = total_loss(0.5, 2.0, 7.0, 0, 48, w);
        assert_eq!(n0a.det, n0b.det);
        assert!((n0a.det - 2.0 / 48.0).abs() < 1e-15);
    }

    #[test]
    fn total_linear_in_beta() {
        let det = total_loss(0.7, 1.2, 0.4, 2, 6, LossWeights::default()).det;
        for beta in [0.0, 0.1, 2.5] {
            let b = total_loss(0.7, 1.2, 0.4, 2, 6, LossWeights { alpha: 1.0, beta });
            assert!((b.total - (0.7 + beta * det)).abs() < 1e-12);
            assert!(b.total >= 0.0 && b.det >= 0.0);
        }
    }
}

use rand::seq::index;

use crate::boxes::{iou, BBox};
use crate::rng::Rng;

/// Largest log-scale change accepted when decoding, as in common detectors.
pub const MAX_LOG_SCALE: f32 = 4.135_166_5; // ln(1000 / 16)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub labels: Vec<Label>,
    /// Encoded regression target for positives, zeros elsewhere.
    pub deltas: Vec<[f32; 4]>,
    pub matched_gt: Vec<Option<usize>>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Positive).count()
    }
}

/// `(dx, dy, dw, dh)` taking `anchor` to `gt`.
pub fn encode(anchor: &BBox, gt: &BBox) -> [f32; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [(gx - ax) / aw, (gy - ay) / ah, (gt.width() / aw).ln(), (gt.height() / ah).ln()]
}

pub fn decode(anchor: &BBox, d: [f32; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(ax + d[0] * aw, ay + d[1] * ah, w, h)
}

/// IoU ≥ `iou_pos` is positive, below `iou_neg` negative, the rest ignored.
/// Every ground truth also claims the anchors that overlap it best (ties
/// included) so that none goes unmatched.
pub fn assign_targets(anchors: &[BBox], gts: &[BBox], iou_pos: f64, iou_neg: f64) -> TargetAssignment {
    let n = anchors.len();
    let mut labels = vec![Label::Negative; n];
    let mut matched_gt = vec![None; n];
    let mut deltas = vec![[0.0; 4]; n];
    if gts.is_empty() {
        return TargetAssignment { labels, deltas, matched_gt };
    }
    let mut best_per_gt = vec![0.0f64; gts.len()];
    let mut best_gt = vec![(0usize, 0.0f64); n];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_gt[a].1 {
                best_gt[a] = (g, v);
            }
            best_per_gt[g] = best_per_gt[g].max(v);
        }
    }
    for a in 0..n {
        let (g, v) = best_gt[a];
        labels[a] = if v >= iou_pos {
            Label::Positive
        } else if v < iou_neg {
            Label::Negative
        } else {
            Label::Ignore
        };
        if labels[a] == Label::Positive {
            matched_gt[a] = Some(g);
        }
    }
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            if best_per_gt[g] > 0.0 && iou(anchor, gt) == best_per_gt[g] {
                labels[a] = Label::Positive;
                matched_gt[a].get_or_insert(g);
            }
        }
    }
    for a in 0..n {
        if let Some(g) = matched_gt[a] {
            deltas[a] = encode(&anchors[a], &gts[g]);
        }
    }
    TargetAssignment { labels, deltas, matched_gt }
}

/// Draws at most `batch` anchors with at most `batch · pos_fraction`
/// positives, returning `(positives, negatives)` in ascending index order.
pub fn sample_anchors(assignment: &TargetAssignment, batch: usize, pos_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let pick = |label: Label| -> Vec<usize> {
        assignment.labels.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect()
    };
    let (pos, neg) = (pick(Label::Positive), pick(Label::Negative));
    let num_pos = pos.len().min((batch as f64 * pos_fraction) as usize);
    let num_neg = neg.len().min(batch - num_pos);
    let mut choose = |pool: &[usize], k: usize| -> Vec<usize> {
        let mut v: Vec<usize> = index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        v.sort_unstable();
        v
    };
    let p = choose(&pos, num_pos);
    let q = choose(&neg, num_neg);
    (p, q)
}

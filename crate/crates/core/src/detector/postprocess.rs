use serde::{Deserialize, Serialize};

use super::assign::decode;
use crate::boxes::{iou, BBox};
use crate::tensor::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub score_thresh: f32,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub pre_nms_top_n: usize,
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the lower index first. A box is dropped when its
/// IoU with a kept box exceeds `thresh`.
pub fn nms(boxes: &[BBox], scores: &[f32], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Scores, decodes, clips and suppresses one image's dense predictions.
pub fn decode_and_nms(
    logits: &[f32],
    deltas: &[[f32; 4]],
    anchors: &[BBox],
    image_hw: (usize, usize),
    cfg: &PostprocessConfig,
) -> Vec<Detection> {
    let (h, w) = (image_hw.0 as f32, image_hw.1 as f32);
    let mut cand: Vec<(usize, f32)> = logits
        .iter()
        .map(|&l| sigmoid(l))
        .enumerate()
        .filter(|&(_, s)| s >= cfg.score_thresh)
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(cfg.pre_nms_top_n);
    let mut boxes = Vec::with_capacity(cand.len());
    let mut scores = Vec::with_capacity(cand.len());
    for &(i, s) in &cand {
        let b = decode(&anchors[i], deltas[i]).clip(w, h);
        if b.is_valid() {
            boxes.push(b);
            scores.push(s);
        }
    }
    nms(&boxes, &scores, cfg.nms_iou)
        .into_iter()
        .take(cfg.max_detections)
        .map(|k| Detection { bbox: boxes[k], score: scores[k] })
        .collect()
}

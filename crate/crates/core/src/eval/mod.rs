//! Detection metrics: FROC sensitivities at fixed false-positive rates and
//! all-points average precision.
//!
//! Predictions from every image are ranked together and swept with a single
//! global score threshold. Predictions with equal scores always enter the
//! sweep together, so no metric depends on how ties are ordered.

mod io;

pub use io::{read_predictions_csv, write_predictions_csv};

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::data::GtRow;
use crate::error::{Error, Result};

pub const DEFAULT_FP_RATES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
}

impl From<&GtRow> for GroundTruth {
    fn from(r: &GtRow) -> Self {
        Self { image_id: format!("{}:{}", r.image_id, r.slice), bbox: r.bbox() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub fp_rates: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresh: 0.5, fp_rates: DEFAULT_FP_RATES.to_vec() }
    }
}

/// Indices of `scores` sorted high to low; ties keep input order.
fn descending(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Outcome of greedy matching for one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub tp: bool,
    /// Index into the ground-truth list.
    pub gt: Option<usize>,
}

/// Greedy matching in global score order. Each prediction takes the
/// unmatched ground truth of its image with the highest IoU, and counts as a
/// true positive when that IoU reaches `iou_thresh`. Results are in the
/// order of `preds`.
pub fn match_detections(preds: &[Prediction], gts: &[GroundTruth], iou_thresh: f64) -> Vec<Match> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let scores: Vec<f32> = preds.iter().map(|p| p.score).collect();
    let mut taken = vec![false; gts.len()];
    let mut out = vec![Match { tp: false, gt: None }; preds.len()];
    for i in descending(&scores) {
        let p = &preds[i];
        let Some(candidates) = by_image.get(p.image_id.as_str()) else { continue };
        let best = candidates
            .iter()
            .filter(|&&g| !taken[g])
            .map(|&g| (g, iou(&p.bbox, &gts[g].bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            if v >= iou_thresh {
                taken[g] = true;
                out[i] = Match { tp: true, gt: Some(g) };
            }
        }
    }
    out
}

/// Cumulative `(tp, fp)` counts after each group of tied scores, in
/// descending score order.
fn operating_points(flags: &[bool], scores: &[f32]) -> Vec<(usize, usize)> {
    let order = descending(scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if flags[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = order.get(k + 1).map_or(true, |&j| scores[j] != scores[i]);
        if group_ends {
            points.push((tp, fp));
        }
    }
    points
}

/// Sensitivity at each FP-per-image rate, read off the step curve with no
/// interpolation: the best recall among thresholds whose false positives
/// per image stay within the rate.
pub fn froc_sensitivity(flags: &[bool], scores: &[f32], num_images: usize, num_gts: usize, fp_rates: &[f64]) -> Vec<f64> {
    assert_eq!(flags.len(), scores.len(), "one flag per score");
    assert!(num_images > 0 && num_gts > 0, "FROC needs at least one image and one ground truth");
    let points = operating_points(flags, scores);
    fp_rates
        .iter()
        .map(|&rate| {
            let tp = points
                .iter()
                .take_while(|&&(_, fp)| fp as f64 / num_images as f64 <= rate)
                .last()
                .map_or(0, |&(tp, _)| tp);
            tp as f64 / num_gts as f64
        })
        .collect()
}

/// Area under the precision envelope over every distinct recall level.
pub fn average_precision(flags: &[bool], scores: &[f32], num_gts: usize) -> f64 {
    assert_eq!(flags.len(), scores.len(), "one flag per score");
    assert!(num_gts > 0, "AP needs at least one ground truth");
    let points = operating_points(flags, scores);
    let mut envelope: Vec<f64> = points.iter().map(|&(tp, fp)| tp as f64 / (tp + fp) as f64).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (&(tp, _), p) in points.iter().zip(&envelope) {
        let recall = tp as f64 / num_gts as f64;
        ap += (recall - prev_recall) * p;
        prev_recall = recall;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub image_id: String,
    pub score: f32,
    pub tp: bool,
    pub gt: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by the FP rate as written in the configuration, e.g. `"0.5"`.
    pub sensitivity_at_fps: IndexMap<String, f64>,
    pub ap_at_05: f64,
    pub iou_thresh: f64,
    pub num_images: usize,
    pub num_gts: usize,
    pub num_predictions: usize,
    pub matches: Vec<MatchRecord>,
}

/// Scores `preds` against `gts`. The image set is every image that has a
/// ground truth or a prediction.
pub fn evaluate(preds: &[Prediction], gts: &[GroundTruth], cfg: &EvalConfig) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Config("evaluation needs at least one ground-truth box".into()));
    }
    let mut images: Vec<&str> = gts.iter().map(|g| g.image_id.as_str()).chain(preds.iter().map(|p| p.image_id.as_str())).collect();
    images.sort_unstable();
    images.dedup();

    let matches = match_detections(preds, gts, cfg.iou_thresh);
    let flags: Vec<bool> = matches.iter().map(|m| m.tp).collect();
    let scores: Vec<f32> = preds.iter().map(|p| p.score).collect();
    let sens = froc_sensitivity(&flags, &scores, images.len(), gts.len(), &cfg.fp_rates);
    Ok(EvalReport {
        sensitivity_at_fps: cfg.fp_rates.iter().map(|r| r.to_string()).zip(sens).collect(),
        ap_at_05: average_precision(&flags, &scores, gts.len()),
        iou_thresh: cfg.iou_thresh,
        num_images: images.len(),
        num_gts: gts.len(),
        num_predictions: preds.len(),
        matches: preds
            .iter()
            .zip(&matches)
            .map(|(p, m)| MatchRecord { image_id: p.image_id.clone(), score: p.score, tp: m.tp, gt: m.gt })
            .collect(),
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Header plus one row: AP followed by each sensitivity.
    pub fn summary_csv(&self) -> String {
        let mut header = vec!["ap_at_05".to_string()];
        let mut row = vec![format!("{:.6}", self.ap_at_05)];
        for (rate, s) in &self.sensitivity_at_fps {
            header.push(format!("sens_at_{rate}"));
            row.push(format!("{s:.6}"));
        }
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

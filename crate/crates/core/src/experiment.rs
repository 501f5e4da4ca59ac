//! Glue shared by the command-line tool and the end-to-end tests.

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{pad_to_multiple, LabeledVolume, SliceSample, TARGET_SPACING_MM};
use crate::error::Result;
use crate::eval::{GroundTruth, Prediction};
use crate::model::{build_detector, ModelGraph};
use crate::train::{key_slice_samples, select_fraction};

/// Detector described by the document, initialised from the training seed.
pub fn build_model(cfg: &ExperimentConfig) -> Result<ModelGraph> {
    build_detector(cfg.backbone.clone(), cfg.detector.clone(), cfg.train.seed)
}

/// Resamples to the standard slice spacing when needed.
pub fn standardize(volumes: Vec<LabeledVolume>) -> Vec<LabeledVolume> {
    volumes
        .into_iter()
        .map(|v| if (v.volume.z_spacing_mm - TARGET_SPACING_MM).abs() > 1e-9 { v.resample_z(TARGET_SPACING_MM) } else { v })
        .collect()
}

/// Key-slice windows of the configured share of `volumes`.
pub fn training_samples(cfg: &ExperimentConfig, volumes: &[LabeledVolume]) -> Result<Vec<SliceSample>> {
    let keep = select_fraction(volumes.len(), cfg.train.dataset_fraction, cfg.train.seed);
    let chosen: Vec<LabeledVolume> = keep.into_iter().map(|i| volumes[i].clone()).collect();
    key_slice_samples(&chosen, cfg.backbone.input_slices)
}

/// Detections on every key slice, volumes processed in parallel.
pub fn predict_key_slices(model: &ModelGraph, volumes: &[LabeledVolume]) -> Result<Vec<Prediction>> {
    let det = model.detector().ok_or_else(|| crate::Error::Config("prediction needs a detector model".into()))?;
    let d = det.input_slices();
    let multiple = det.config.anchors.coarsest_stride();
    let per_volume: Vec<Vec<Prediction>> = volumes
        .par_iter()
        .map(|v| {
            let mut out = Vec::new();
            for &k in &v.key_slices {
                let s = pad_to_multiple(&v.sample(k, d)?, multiple);
                let x = s.window.reshape(&[1, 1, d, s.height(), s.width()])?;
                for det in det.predict(&model.params, &x)?.remove(0) {
                    out.push(Prediction { image_id: v.image_id(k), bbox: det.bbox, score: det.score });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_volume.into_iter().flatten().collect())
}

/// Boxes of every key slice.
pub fn ground_truth(volumes: &[LabeledVolume]) -> Vec<GroundTruth> {
    volumes
        .iter()
        .flat_map(|v| {
            v.key_slices
                .iter()
                .flat_map(move |&k| v.boxes_on(k).iter().map(move |b| GroundTruth { image_id: v.image_id(k), bbox: *b }))
        })
        .collect()
}

//! Pyramid neck, dense single-class head, anchor targets and decoding.

mod anchors;
mod assign;
mod fpn;
mod loss;
mod postprocess;

pub use anchors::AnchorConfig;
pub use assign::{assign_targets, decode, encode, sample_anchors, Label, TargetAssignment, MAX_LOG_SCALE};
pub use fpn::{Fpn, Head};
pub use loss::{detection_loss, sample_targets, LossConfig, LossParts, SampledTargets};
pub use postprocess::{decode_and_nms, nms, Detection, PostprocessConfig};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::graph::{BoundParams, Exec, ShapeTracer, TapeExec};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub fpn_channels: usize,
    pub anchors: AnchorConfig,
    pub iou_pos: f64,
    pub iou_neg: f64,
    pub batch_size_per_image: usize,
    pub positive_fraction: f64,
    pub smooth_l1_beta: f64,
    pub score_thresh: f32,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub pre_nms_top_n: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            fpn_channels: 256,
            anchors: AnchorConfig::default(),
            iou_pos: 0.7,
            iou_neg: 0.3,
            batch_size_per_image: loss.batch_size_per_image,
            positive_fraction: loss.positive_fraction,
            smooth_l1_beta: loss.smooth_l1_beta,
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
            pre_nms_top_n: 1000,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.fpn_channels == 0 {
            return bad("fpn_channels must be positive");
        }
        if !(0.0..=1.0).contains(&self.iou_neg) || !(self.iou_neg..=1.0).contains(&self.iou_pos) {
            return bad("need 0 <= iou_neg <= iou_pos <= 1");
        }
        if self.batch_size_per_image == 0 || !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("batch_size_per_image must be positive and positive_fraction in [0, 1]");
        }
        if self.smooth_l1_beta <= 0.0 || self.max_detections == 0 || self.pre_nms_top_n == 0 {
            return bad("smooth_l1_beta, max_detections and pre_nms_top_n must be positive");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            batch_size_per_image: self.batch_size_per_image,
            positive_fraction: self.positive_fraction,
            smooth_l1_beta: self.smooth_l1_beta,
        }
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            score_thresh: self.score_thresh,
            nms_iou: self.nms_iou,
            max_detections: self.max_detections,
            pre_nms_top_n: self.pre_nms_top_n,
        }
    }
}

/// Dense outputs over the flattened anchor list.
#[derive(Clone, Debug)]
pub struct DenseOutput<V> {
    /// `[N, anchors]`.
    pub logits: V,
    /// `[N, anchors, 4]`.
    pub deltas: V,
    pub backbone: BackboneOutput<V>,
}

/// Backbone, pyramid neck and dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub head: Head,
    pub config: DetectorConfig,
}

impl Detector {
    pub fn new(backbone: BackboneConfig, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(backbone)?;
        let fpn = Fpn::new(backbone.stage_channels(), config.fpn_channels);
        let head = Head { channels: config.fpn_channels, anchors_per_location: config.anchors.per_location() };
        Ok(Self { backbone, fpn, head, config })
    }

    pub fn input_slices(&self) -> usize {
        self.backbone.config.input_slices
    }

    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<DenseOutput<E::Value>> {
        let backbone = self.backbone.forward(e, x)?;
        let levels = self.fpn.forward(e, &backbone.features)?;
        let (logits, deltas) = self.head.forward(e, &levels)?;
        Ok(DenseOutput { logits, deltas, backbone })
    }

    pub fn trace(&self, height: usize, width: usize) -> Result<ShapeTracer> {
        let mut t = ShapeTracer::new();
        self.forward(&mut t, &vec![1, 1, self.input_slices(), height, width])?;
        Ok(t)
    }

    pub fn anchors(&self, height: usize, width: usize) -> Result<Vec<BBox>> {
        self.config.anchors.generate_flat(height, width)
    }

    /// Scored boxes for each window of a `[N, 1, D, H, W]` batch.
    pub fn predict(&self, params: &ParamStore, input: &Tensor) -> Result<Vec<Vec<Detection>>> {
        let s = input.shape().to_vec();
        if s.len() != 5 {
            return Err(Error::Shape(format!("predict expects [N, 1, D, H, W], got {s:?}")));
        }
        let anchors = self.anchors(s[3], s[4])?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut TapeExec::new(&mut tape, &bound), &x)?;
        let logits = tape.value(out.logits);
        let deltas = tape.value(out.deltas);
        let a = anchors.len();
        let post = self.config.postprocess();
        Ok((0..s[0])
            .map(|n| {
                let l = &logits.data()[n * a..(n + 1) * a];
                let d: Vec<[f32; 4]> = deltas.data()[n * a * 4..(n + 1) * a * 4]
                    .chunks_exact(4)
                    .map(|c| [c[0], c[1], c[2], c[3]])
                    .collect();
                decode_and_nms(l, &d, &anchors, (s[3], s[4]), &post)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;

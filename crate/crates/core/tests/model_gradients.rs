mod common;

use common::*;
use mp3d::backbone::BackboneConfig;
use mp3d::boxes::BBox;
use mp3d::detector::{assign_targets, detection_loss, Detector, DetectorConfig};
use mp3d::graph::{BoundParams, TapeExec};
use mp3d::rng::stream;
use mp3d::tensor::Scalar;
use mp3d::train::loss_and_grads;
use mp3d::{build_detector, ModelGraph, Tape, Tensor};
use rand::Rng;

fn model() -> ModelGraph {
    let backbone = BackboneConfig {
        stage_blocks: [1, 1, 1, 1],
        stage_channels: [16, 32, 64, 64],
        stem_channels: 16,
        input_slices: 3,
        ..BackboneConfig::default()
    };
    build_detector(backbone, DetectorConfig { fpn_channels: 16, ..DetectorConfig::default() }, 11).unwrap()
}

fn batch() -> (Tensor, Vec<Vec<BBox>>) {
    let x = random_tensor::<f32>(&mut rng(3), &[1, 1, 3, 64, 64]);
    (x, vec![vec![BBox::new(12.0, 14.0, 30.0, 34.0), BBox::new(40.0, 8.0, 52.0, 22.0)]])
}

/// Total detection loss with the anchor sample drawn from a fixed stream,
/// so repeated evaluations see identical targets.
fn loss<T: Scalar>(det: &Detector, params: &[(String, Tensor<T>)], x: &Tensor, boxes: &[Vec<BBox>]) -> f64 {
    let anchors = det.anchors(64, 64).unwrap();
    let cfg = &det.config;
    let assignments: Vec<_> = boxes.iter().map(|b| assign_targets(&anchors, b, cfg.iou_pos, cfg.iou_neg)).collect();
    let mut tape = Tape::<T>::new();
    let bound = BoundParams::bind_values(&mut tape, params, false);
    let xv = tape.constant(x.cast());
    let out = det.forward(&mut TapeExec::new(&mut tape, &bound), &xv).unwrap();
    let parts = detection_loss(&mut tape, out.logits, out.deltas, &assignments, &cfg.loss(), &mut stream(0, "sampler")).unwrap();
    tape.value(parts.total).data()[0].as_f64()
}

/// Analytic gradients from a tape over `T` with the same sampled targets.
fn analytic<T: Scalar>(det: &Detector, params: &[(String, Tensor<T>)], x: &Tensor, boxes: &[Vec<BBox>]) -> Vec<Tensor<f64>> {
    let anchors = det.anchors(64, 64).unwrap();
    let cfg = &det.config;
    let assignments: Vec<_> = boxes.iter().map(|b| assign_targets(&anchors, b, cfg.iou_pos, cfg.iou_neg)).collect();
    let mut tape = Tape::<T>::new();
    let bound = BoundParams::bind_values(&mut tape, params, true);
    let xv = tape.constant(x.cast());
    let out = det.forward(&mut TapeExec::new(&mut tape, &bound), &xv).unwrap();
    let parts = detection_loss(&mut tape, out.logits, out.deltas, &assignments, &cfg.loss(), &mut stream(0, "sampler")).unwrap();
    tape.backward(parts.total).unwrap();
    bound.iter().map(|(_, &v)| tape.grad(v).unwrap().cast()).collect()
}

/// Picks `(tensor, element)` probes spread over the backbone, neck and head.
fn probes(params: &[(String, Tensor<f64>)], count: usize) -> Vec<(usize, usize)> {
    let mut r = rng(9);
    let stride = (params.len() / count).max(1);
    (0..params.len()).step_by(stride).take(count).map(|t| (t, r.gen_range(0..params[t].1.numel()))).collect()
}

fn central_difference(det: &Detector, params: &[(String, Tensor<f64>)], probe: (usize, usize), x: &Tensor, boxes: &[Vec<BBox>], h: f64) -> f64 {
    let bumped = |delta: f64| {
        let mut p = params.to_vec();
        let mut d = p[probe.0].1.data().to_vec();
        d[probe.1] += delta;
        p[probe.0].1 = Tensor::new(p[probe.0].1.shape(), d).unwrap();
        loss(det, &p, x, boxes)
    };
    (bumped(h) - bumped(-h)) / (2.0 * h)
}

#[test]
fn detector_loss_gradients_match_in_f64_shadow_mode() {
    let m = model();
    let det = m.detector().unwrap();
    let (x, boxes) = batch();
    let params: Vec<(String, Tensor<f64>)> = m.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let grads = analytic(det, &params, &x, &boxes);
    let (mut diff, mut norm) = (0.0, 0.0);
    for (t, i) in probes(&params, 24) {
        let numeric = central_difference(det, &params, (t, i), &x, &boxes, 1e-6);
        diff += (grads[t].data()[i] - numeric).powi(2);
        norm += numeric.powi(2);
    }
    let rel = (diff / norm).sqrt();
    assert!(rel < 1e-6, "relative error {rel:e}");
}

#[test]
fn training_step_gradients_match_the_f64_shadow() {
    let m = model();
    let det = m.detector().unwrap();
    let (x, boxes) = batch();
    let step = loss_and_grads(det, &m.params, &x, &boxes, &mut stream(0, "sampler"), 0).unwrap();
    let params: Vec<(String, Tensor<f64>)> = m.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let probes = probes(&params, 8);
    let scale = probes.iter().map(|&(t, i)| step.grads[&params[t].0].data()[i].abs() as f64).fold(0.0, f64::max);
    for &(t, i) in &probes {
        let numeric = central_difference(det, &params, (t, i), &x, &boxes, 1e-6);
        let a = step.grads[&params[t].0].data()[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2 * scale);
        assert!(err < 1e-2, "{}[{i}]: f32 {a:e}, numeric {numeric:e}, rel {err:e}", params[t].0);
    }
}

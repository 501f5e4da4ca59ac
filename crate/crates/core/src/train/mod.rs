//! SGD training of the detector on pre-extracted slice windows.

mod loader;

pub use loader::prefetch;

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, pad_to_multiple, AugmentConfig, LabeledVolume, SliceSample};
use crate::detector::{assign_targets, detection_loss, Detector};
use crate::error::{Error, Result};
use crate::graph::{BoundParams, TapeExec};
use crate::model::ModelGraph;
use crate::params::ParamStore;
use crate::rng::stream;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs after which the learning rate drops by `gamma`. Empty means
    /// two thirds and eleven twelfths of the schedule.
    pub decay_epochs: Vec<usize>,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warm-up from a third of the base rate.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    /// Share of the training volumes used, drawn with the seed.
    pub dataset_fraction: f64,
    pub loader_workers: usize,
    pub loader_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 20,
            seed: 0,
            decay_epochs: Vec::new(),
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 0,
            batch_size: 2,
            augment: AugmentConfig::default(),
            dataset_fraction: 1.0,
            loader_workers: 2,
            loader_depth: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.dataset_fraction > 0.0 && self.dataset_fraction <= 1.0) {
            return bad("dataset_fraction must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || !(self.gamma > 0.0) {
            return bad("need momentum in [0, 1), weight_decay >= 0 and gamma > 0");
        }
        if self.augment.reference_size == 0 || self.augment.scales.iter().any(|&s| s == 0) {
            return bad("augment scales must be positive");
        }
        Ok(())
    }

    pub fn decay_points(&self) -> Vec<usize> {
        if self.decay_epochs.is_empty() {
            vec![self.epochs * 2 / 3, self.epochs * 11 / 12]
        } else {
            self.decay_epochs.clone()
        }
    }

    /// Learning rate for `step`, which falls in `epoch`.
    pub fn lr_at(&self, epoch: usize, step: usize) -> f64 {
        let decays = self.decay_points().iter().filter(|&&e| epoch >= e).count();
        let mut lr = self.lr * self.gamma.powi(decays as i32);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            lr *= 1.0 / 3.0 + t * 2.0 / 3.0;
        }
        lr
    }
}

/// Indices of a seeded `fraction` of `n` items, ascending.
pub fn select_fraction(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let keep = ((n as f64 * fraction).round() as usize).clamp(n.min(1), n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "fraction"));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// One `depth`-slice window per key slice of every volume.
pub fn key_slice_samples(volumes: &[LabeledVolume], depth: usize) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for v in volumes {
        for &k in &v.key_slices {
            out.push(v.sample(k, depth)?);
        }
    }
    Ok(out)
}

/// Stacks windows into `[N, 1, D, H, W]`, zero-padding each to the largest
/// extent in the batch rounded up to `multiple`.
pub fn collate(samples: &[SliceSample], multiple: usize) -> Result<(Tensor, Vec<SliceSample>)> {
    let padded: Vec<SliceSample> = samples.iter().map(|s| pad_to_multiple(s, multiple)).collect();
    let d = padded[0].depth();
    let h = padded.iter().map(SliceSample::height).max().unwrap_or(0);
    let w = padded.iter().map(SliceSample::width).max().unwrap_or(0);
    let mut data = Vec::with_capacity(padded.len() * d * h * w);
    for s in &padded {
        if s.depth() != d {
            return Err(Error::Shape(format!("batch mixes depths {d} and {}", s.depth())));
        }
        let src = s.window.data();
        for k in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(if y < s.height() && x < s.width() { src[(k * s.height() + y) * s.width() + x] } else { 0.0 });
                }
            }
        }
    }
    Ok((Tensor::new(&[padded.len(), 1, d, h, w], data)?, padded))
}

/// Heavy-ball SGD: `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: IndexMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum: momentum as f32, weight_decay: weight_decay as f32, velocity: IndexMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) {
        let lr = lr as f32;
        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let data = w.data_mut();
            for ((wi, &gi), vi) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
}

/// Loss and parameter gradients of one batch.
pub struct StepResult {
    pub record: LossRecord,
    pub grads: IndexMap<String, Tensor>,
}

/// Forward and backward pass over one collated batch.
pub fn loss_and_grads(
    det: &Detector,
    params: &ParamStore,
    input: &Tensor,
    boxes: &[Vec<crate::boxes::BBox>],
    rng: &mut crate::rng::Rng,
    step: usize,
) -> Result<StepResult> {
    let s = input.shape();
    let anchors = det.anchors(s[3], s[4])?;
    let cfg = &det.config;
    let assignments: Vec<_> = boxes.iter().map(|b| assign_targets(&anchors, b, cfg.iou_pos, cfg.iou_neg)).collect();

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let x = tape.constant(input.clone());
    let out = det.forward(&mut TapeExec::new(&mut tape, &bound), &x)?;
    let parts = detection_loss(&mut tape, out.logits, out.deltas, &assignments, &cfg.loss(), rng)?;
    let record = LossRecord {
        step,
        loss_cls: tape.value(parts.cls).data()[0] as f64,
        loss_reg: tape.value(parts.reg).data()[0] as f64,
        loss_total: tape.value(parts.total).data()[0] as f64,
    };
    if !record.loss_total.is_finite() {
        return Err(Error::Divergence { step, loss_cls: record.loss_cls, loss_reg: record.loss_reg });
    }
    tape.backward(parts.total)?;
    let grads = bound
        .iter()
        .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.clone())))
        .collect();
    Ok(StepResult { record, grads })
}

pub struct TrainOutcome {
    pub model: ModelGraph,
    /// Parameters at the end of the epoch with the lowest mean loss.
    pub best: ModelGraph,
    pub best_epoch: Option<usize>,
    pub losses: Vec<LossRecord>,
    pub epoch_losses: Vec<f64>,
}

/// Spatial sizes are padded to this multiple, the coarsest anchor stride.
fn pad_multiple(det: &Detector) -> usize {
    det.config.anchors.coarsest_stride()
}

/// Trains `model` on `samples` and reports every step to `on_step`.
///
/// Every random choice comes from named streams of `cfg.seed`: `shuffle/<epoch>`
/// orders the samples, `augment/<step>` transforms a batch and `sampler`
/// draws the anchors in the loss. Results are bit-identical across runs and
/// loader worker counts.
pub fn train(
    mut model: ModelGraph,
    samples: &[SliceSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let det = model.detector().ok_or_else(|| Error::Config("training needs a detector model".into()))?.clone();
    if samples.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("no training samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.depth() != det.input_slices()) {
        return Err(Error::Shape(format!("model takes {} slices but a sample has {}", det.input_slices(), s.depth())));
    }
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let mut plan: Vec<(usize, Vec<usize>)> = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &format!("shuffle/{epoch}")));
        plan.extend(order.chunks(cfg.batch_size).map(|c| (epoch, c.to_vec())));
    }

    let multiple = pad_multiple(&det);
    let make = |step: usize| -> Result<(Tensor, Vec<Vec<crate::boxes::BBox>>)> {
        let mut rng = stream(cfg.seed, &format!("augment/{step}"));
        let batch: Vec<SliceSample> = plan[step].1.iter().map(|&i| augment(&samples[i], &cfg.augment, &mut rng)).collect();
        let (input, padded) = collate(&batch, multiple)?;
        Ok((input, padded.into_iter().map(|s| s.gt_boxes).collect()))
    };

    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut sampler = stream(cfg.seed, "sampler");
    let mut losses = Vec::with_capacity(plan.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), f64::INFINITY, None);
    let mut epoch_sum = 0.0;
    prefetch(plan.len(), cfg.loader_workers, cfg.loader_depth, make, |step, batch| {
        let (input, boxes) = batch?;
        let epoch = plan[step].0;
        let r = loss_and_grads(&det, &model.params, &input, &boxes, &mut sampler, step)?;
        sgd.step(&mut model.params, &r.grads, cfg.lr_at(epoch, step));
        on_step(&r.record);
        losses.push(r.record);
        epoch_sum += r.record.loss_total;
        if (step + 1) % steps_per_epoch == 0 {
            let mean = epoch_sum / steps_per_epoch as f64;
            epoch_losses.push(mean);
            epoch_sum = 0.0;
            if mean < best.1 {
                best = (model.clone(), mean, Some(epoch));
            }
        }
        Ok(())
    })?;
    Ok(TrainOutcome { model, best: best.0, best_epoch: best.2, losses, epoch_losses })
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,loss_cls,loss_reg,loss_total\n");
    for r in losses {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.step, r.loss_cls, r.loss_reg, r.loss_total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::data::io_csv_error(path, e))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| crate::data::io_csv_error(path, e))
}

/// Trailing mean of `loss_total` over `window` steps.
pub fn smoothed(losses: &[LossRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut acc = 0.0;
    losses
        .iter()
        .enumerate()
        .map(|(i, r)| {
            acc += r.loss_total;
            if i >= window {
                acc -= losses[i - window].loss_total;
            }
            acc / (i + 1).min(window) as f64
        })
        .collect()
}

/// Steps taken (1-based) until the trailing mean over a full `window`
/// first reaches `target`.
pub fn steps_to_reach(losses: &[LossRecord], window: usize, target: f64) -> Option<usize> {
    let start = window.max(1) - 1;
    smoothed(losses, window).iter().skip(start).position(|&v| v <= target).map(|i| i + start + 1)
}

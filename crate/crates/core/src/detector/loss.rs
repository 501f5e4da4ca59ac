use super::assign::{sample_anchors, TargetAssignment};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub batch_size_per_image: usize,
    pub positive_fraction: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { batch_size_per_image: 256, positive_fraction: 0.5, smooth_l1_beta: 1.0 / 9.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub reg: Var,
    pub total: Var,
}

/// Dense targets and weights built from per-image sampled anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTargets<T: Scalar> {
    pub cls_target: Tensor<T>,
    pub cls_weight: Tensor<T>,
    pub reg_target: Tensor<T>,
    pub reg_weight: Tensor<T>,
}

pub fn sample_targets<T: Scalar>(assignments: &[TargetAssignment], cfg: &LossConfig, rng: &mut Rng) -> Result<SampledTargets<T>> {
    let n = assignments.len();
    let a = assignments.first().map_or(0, |x| x.labels.len());
    if n == 0 || a == 0 || assignments.iter().any(|x| x.labels.len() != a) {
        return Err(Error::Shape(format!("need one assignment per image over the same {a} anchors")));
    }
    let mut ct = vec![T::zero(); n * a];
    let mut cw = vec![T::zero(); n * a];
    let mut rt = vec![T::zero(); n * a * 4];
    let mut rw = vec![T::zero(); n * a * 4];
    for (img, asg) in assignments.iter().enumerate() {
        let (pos, neg) = sample_anchors(asg, cfg.batch_size_per_image, cfg.positive_fraction, rng);
        for &i in &pos {
            ct[img * a + i] = T::one();
            cw[img * a + i] = T::one();
            for k in 0..4 {
                rt[(img * a + i) * 4 + k] = T::from_f64(asg.deltas[i][k] as f64);
                rw[(img * a + i) * 4 + k] = T::one();
            }
        }
        for &i in &neg {
            cw[img * a + i] = T::one();
        }
    }
    Ok(SampledTargets {
        cls_target: Tensor::new(&[n, a], ct)?,
        cls_weight: Tensor::new(&[n, a], cw)?,
        reg_target: Tensor::new(&[n, a, 4], rt)?,
        reg_weight: Tensor::new(&[n, a, 4], rw)?,
    })
}

/// Weighted-mean BCE over sampled anchors plus weighted-mean smooth-L1 over
/// the coordinates of sampled positives. Both terms are zero when nothing is
/// sampled.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    deltas: Var,
    assignments: &[TargetAssignment],
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<LossParts> {
    let t = sample_targets::<T>(assignments, cfg, rng)?;
    let cls = tape.bce_with_logits(logits, &t.cls_target, &t.cls_weight)?;
    let reg = tape.smooth_l1(deltas, &t.reg_target, T::from_f64(cfg.smooth_l1_beta), &t.reg_weight)?;
    let total = tape.add(cls, reg)?;
    Ok(LossParts { cls, reg, total })
}

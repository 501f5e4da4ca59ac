use super::elementwise::sigmoid;
use super::tape::{Op, Tape, Var};
use super::{expect_same_shape, Scalar, Tensor};
use crate::error::{Error, Result};

fn check_weights<T: Scalar>(op: &str, pred: &[usize], target: &Tensor<T>, weights: &Tensor<T>) -> Result<T> {
    expect_same_shape(op, pred, target.shape())?;
    expect_same_shape(op, pred, weights.shape())?;
    if weights.data().iter().any(|&w| w < T::zero()) {
        return Err(Error::Config(format!("{op}: weights must be nonnegative")));
    }
    Ok(weights.sum())
}

pub(crate) fn bce_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, weights: &Tensor<T>, weight_sum: T, up: T) -> Tensor<T> {
    if weight_sum <= T::zero() {
        return Tensor::zeros(pred.shape());
    }
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.data())
        .map(|((&x, &t), &w)| up * w * (sigmoid(x) - t) / weight_sum)
        .collect();
    Tensor::new(pred.shape(), data).expect("bce grad")
}

fn smooth_l1_elem<T: Scalar>(d: T, beta: T) -> T {
    let half = T::from_f64(0.5);
    if d.abs() < beta {
        half * d * d / beta
    } else {
        d.abs() - half * beta
    }
}

pub(crate) fn smooth_l1_backward<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weights: &Tensor<T>,
    beta: T,
    weight_sum: T,
    up: T,
) -> Tensor<T> {
    if weight_sum <= T::zero() {
        return Tensor::zeros(pred.shape());
    }
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.data())
        .map(|((&p, &t), &w)| {
            let d = p - t;
            let dl = if d.abs() < beta { d / beta } else { d.signum() };
            up * w * dl / weight_sum
        })
        .collect();
    Tensor::new(pred.shape(), data).expect("smooth l1 grad")
}

impl<T: Scalar> Tape<T> {
    /// Weighted mean of the binary cross-entropy between `sigmoid(pred)` and
    /// `target`: `Σ w·ℓ / Σ w`, or zero when all weights vanish.
    pub fn bce_with_logits(&mut self, pred: Var, target: &Tensor<T>, weights: &Tensor<T>) -> Result<Var> {
        let weight_sum = check_weights("bce_with_logits", self.shape(pred), target, weights)?;
        let total = if weight_sum > T::zero() {
            self.value(pred)
                .data()
                .iter()
                .zip(target.data())
                .zip(weights.data())
                .map(|((&x, &t), &w)| w * (x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln()))
                .sum::<T>()
                / weight_sum
        } else {
            T::zero()
        };
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::BceWithLogits { pred, target: target.clone(), weights: weights.clone(), weight_sum },
        ))
    }

    /// Weighted mean Huber-style loss: `0.5·d²/beta` below `beta`, else
    /// `|d| − 0.5·beta`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>, beta: T, weights: &Tensor<T>) -> Result<Var> {
        let weight_sum = check_weights("smooth_l1", self.shape(pred), target, weights)?;
        if beta <= T::zero() {
            return Err(Error::Config("smooth_l1: beta must be positive".into()));
        }
        let total = if weight_sum > T::zero() {
            self.value(pred)
                .data()
                .iter()
                .zip(target.data())
                .zip(weights.data())
                .map(|((&p, &t), &w)| w * smooth_l1_elem(p - t, beta))
                .sum::<T>()
                / weight_sum
        } else {
            T::zero()
        };
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::SmoothL1 { pred, target: target.clone(), weights: weights.clone(), beta, weight_sum },
        ))
    }
}

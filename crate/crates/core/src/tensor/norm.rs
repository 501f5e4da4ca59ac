use super::tape::{Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub(crate) struct GroupNormOut<T> {
    pub value: Tensor<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Statistics are gathered per `(sample, group, slice)`, where the axis
/// after channels is split into `slices` independent planes. `slices == 1`
/// is ordinary group normalization.
#[derive(Clone, Copy)]
struct Layout {
    n: usize,
    c: usize,
    slices: usize,
    inner: usize,
    groups: usize,
}

impl Layout {
    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn index(&self, s: usize, ch: usize, d: usize, i: usize) -> usize {
        ((s * self.c + ch) * self.slices + d) * self.inner + i
    }

    fn stat(&self, s: usize, g: usize, d: usize) -> usize {
        (s * self.groups + g) * self.slices + d
    }
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, groups: usize, per_slice: bool) -> Result<Layout> {
    let min_rank = if per_slice { 3 } else { 2 };
    if x.rank() < min_rank {
        return Err(Error::Shape(format!("group_norm: input rank {} < {min_rank}", x.rank())));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Divisibility { what: "group_norm channels".into(), value: c, divisor: groups });
    }
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::Shape(format!("group_norm: {name} shape {:?} does not match {c} channels", t.shape())));
        }
    }
    let spatial = x.numel() / (n * c);
    let slices = if per_slice { x.shape()[2] } else { 1 };
    Ok(Layout { n, c, slices, inner: spatial / slices, groups })
}

fn forward<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, l: Layout, eps: T) -> Result<GroupNormOut<T>> {
    let cg = l.cg();
    let count = T::from_f64((cg * l.inner) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    let mut means = vec![T::zero(); l.n * l.groups * l.slices];
    let mut rstds = vec![T::zero(); means.len()];
    for s in 0..l.n {
        for g in 0..l.groups {
            for d in 0..l.slices {
                let rows = || (0..cg).map(move |ci| l.index(s, g * cg + ci, d, 0));
                let mut sum = T::zero();
                for r in rows() {
                    sum += xd[r..r + l.inner].iter().copied().sum::<T>();
                }
                let mean = sum / count;
                let mut sq = T::zero();
                for r in rows() {
                    sq += xd[r..r + l.inner].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let rstd = T::one() / (sq / count + eps).sqrt();
                for (ci, r) in rows().enumerate() {
                    let ch = g * cg + ci;
                    let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                    for i in r..r + l.inner {
                        out[i] = (xd[i] - mean) * rstd * ga + be;
                    }
                }
                let k = l.stat(s, g, d);
                means[k] = mean;
                rstds[k] = rstd;
            }
        }
    }
    Ok(GroupNormOut { value: Tensor::new(x.shape(), out)?, mean: means, rstd: rstds })
}

pub(crate) struct GroupNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    up: &Tensor<T>,
    groups: usize,
    per_slice: bool,
    mean: &[T],
    rstd: &[T],
) -> GroupNormGrads<T> {
    let l = check(x, gamma, gamma, groups, per_slice).expect("validated in forward");
    let cg = l.cg();
    let m = T::from_f64((cg * l.inner) as f64);
    let (xd, ud, gd) = (x.data(), up.data(), gamma.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); l.c];
    let mut dbeta = vec![T::zero(); l.c];
    for s in 0..l.n {
        for g in 0..l.groups {
            for d in 0..l.slices {
                let k = l.stat(s, g, d);
                let (mu, rs) = (mean[k], rstd[k]);
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let r = l.index(s, ch, d, 0);
                    for i in r..r + l.inner {
                        let xhat = (xd[i] - mu) * rs;
                        dgamma[ch] += ud[i] * xhat;
                        dbeta[ch] += ud[i];
                        let dxhat = ud[i] * gd[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let r = l.index(s, ch, d, 0);
                    for i in r..r + l.inner {
                        let xhat = (xd[i] - mu) * rs;
                        let dxhat = ud[i] * gd[ch];
                        dx[i] = rs / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        }
    }
    GroupNormGrads {
        input: Tensor::new(x.shape(), dx).expect("gn grad"),
        gamma: Tensor::new(&[l.c], dgamma).expect("gn grad"),
        beta: Tensor::new(&[l.c], dbeta).expect("gn grad"),
    }
}

impl<T: Scalar> Tape<T> {
    /// Group normalization over `[N, C, ...]` with per-channel affine
    /// parameters and `eps = 1e-5`.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.group_norm_eps(input, gamma, beta, groups, T::from_f64(GROUP_NORM_EPS))
    }

    pub fn group_norm_eps(&mut self, input: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        self.group_norm_impl(input, gamma, beta, groups, eps, false)
    }

    /// Group normalization of `[N, C, D, ...]` where every index along `D`
    /// is normalized on its own, as if `D` were folded into the batch.
    pub fn group_norm_per_slice(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.group_norm_impl(input, gamma, beta, groups, T::from_f64(GROUP_NORM_EPS), true)
    }

    fn group_norm_impl(&mut self, input: Var, gamma: Var, beta: Var, groups: usize, eps: T, per_slice: bool) -> Result<Var> {
        let (x, ga, be) = (self.value(input), self.value(gamma), self.value(beta));
        let layout = check(x, ga, be, groups, per_slice)?;
        let out = forward(x, ga, be, layout, eps)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let op = Op::GroupNorm { input, gamma, beta, groups, per_slice, mean: out.mean, rstd: out.rstd };
        Ok(self.push(out.value, rg, op))
    }
}

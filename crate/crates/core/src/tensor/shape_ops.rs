use super::tape::{Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let rank = perm.len();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(x.numel());
    for _ in 0..x.numel() {
        let src: usize = (0..rank).map(|i| idx[i] * in_strides[perm[i]]).sum();
        out.push(x.data()[src]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute")
}

/// Splits a shape into (outer, axis extent, inner) block sizes.
fn blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn narrow_backward<T: Scalar>(in_shape: &[usize], up: &Tensor<T>, axis: usize, start: usize) -> Tensor<T> {
    let (outer, extent, inner) = blocks(in_shape, axis);
    let len = up.shape()[axis];
    let mut dx = Tensor::zeros(in_shape);
    let buf = dx.data_mut();
    for o in 0..outer {
        let dst = (o * extent + start) * inner;
        let src = o * len * inner;
        buf[dst..dst + len * inner].copy_from_slice(&up.data()[src..src + len * inner]);
    }
    dx
}

pub(crate) fn concat_backward<T: Scalar>(shapes: &[&[usize]], up: &Tensor<T>, axis: usize) -> Vec<Tensor<T>> {
    let (outer, total, inner) = blocks(up.shape(), axis);
    let mut offset = 0;
    shapes
        .iter()
        .map(|shape| {
            let len = shape[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                data.extend_from_slice(&up.data()[src..src + len * inner]);
            }
            offset += len;
            Tensor::new(shape, data).expect("concat grad")
        })
        .collect()
}

pub(crate) fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::Shape(format!("upsample2x_nearest: rank {} < 2", x.rank())));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = x.numel() / (h * w);
    let mut out = Vec::with_capacity(x.numel() * 4);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for xo in 0..2 * w {
                out.push(row[xo / 2]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] *= 2;
    shape[r - 1] *= 2;
    Tensor::new(&shape, out)
}

pub(crate) fn upsample2x_backward<T: Scalar>(in_shape: &[usize], up: &Tensor<T>) -> Tensor<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let mut dx = Tensor::zeros(in_shape);
    let planes = dx.numel() / (h * w);
    let buf = dx.data_mut();
    for p in 0..planes {
        let src = &up.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xo in 0..2 * w {
                buf[p * h * w + (y / 2) * w + xo / 2] += src[y * 2 * w + xo];
            }
        }
    }
    dx
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("permute: {perm:?} is not a permutation of {rank} axes")));
        }
        let value = permute(self.value(x), perm);
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Permute { input: x, perm: perm.to_vec() }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow: range {start}..{} on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = blocks(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Narrow { input: x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len() && (0..s.len()).all(|i| i == axis || s[i] == first[i]);
            if !compatible {
                return Err(Error::Shape(format!("concat: shape {s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = blocks(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let rg = self.any_grad(xs);
        Ok(self.push(value, rg, Op::Concat { inputs: xs.to_vec(), axis }))
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2x_nearest(&mut self, x: Var) -> Result<Var> {
        let value = upsample2x(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Upsample2x(x)))
    }
}

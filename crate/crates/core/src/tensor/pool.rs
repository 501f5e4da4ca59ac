use super::tape::{Op, Tape, Var};
use super::{expect_rank, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Window, stride and padding of a 3D pooling layer. Max pooling never
/// selects padding; average pooling divides by the in-bounds element count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub mode: PoolMode,
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl PoolGeometry {
    pub fn new(mode: PoolMode, window: [usize; 3], stride: [usize; 3]) -> Self {
        Self { mode, window, stride, pad: [0; 3] }
    }

    pub fn with_pad(mut self, pad: [usize; 3]) -> Self {
        self.pad = pad;
        self
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("pool3d input", input, 5)?;
        let extents: Vec<usize> = (0..3).map(|a| input[2 + a] + 2 * self.pad[a]).collect();
        if (0..3).any(|a| self.window[a] > extents[a] || self.window[a] == 0 || self.stride[a] == 0) {
            return Err(Error::WindowTooLarge { window: self.window.to_vec(), extents });
        }
        let mut out = input[..2].to_vec();
        out.extend((0..3).map(|a| (extents[a] - self.window[a]) / self.stride[a] + 1));
        Ok(out)
    }
}

/// Iterates in-bounds input offsets (within one `D×H×W` plane) of the window
/// anchored at output position `o`, in row-major order.
fn window_offsets(
    o: [usize; 3],
    input: [usize; 3],
    geom: &PoolGeometry,
    mut f: impl FnMut(usize),
) {
    let start = |a: usize| (o[a] * geom.stride[a]) as isize - geom.pad[a] as isize;
    let (z0, y0, x0) = (start(0), start(1), start(2));
    for dz in 0..geom.window[0] as isize {
        let z = z0 + dz;
        if z < 0 || z >= input[0] as isize {
            continue;
        }
        for dy in 0..geom.window[1] as isize {
            let y = y0 + dy;
            if y < 0 || y >= input[1] as isize {
                continue;
            }
            for dx in 0..geom.window[2] as isize {
                let x = x0 + dx;
                if x < 0 || x >= input[2] as isize {
                    continue;
                }
                f((z as usize * input[1] + y as usize) * input[2] + x as usize);
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(x: &Tensor<T>, geom: &PoolGeometry) -> Result<(Tensor<T>, Vec<usize>)> {
    let out_shape = geom.output_shape(x.shape())?;
    let input = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let output = [out_shape[2], out_shape[3], out_shape[4]];
    let in_plane: usize = input.iter().product();
    let planes = x.shape()[0] * x.shape()[1];
    let mut out = Vec::with_capacity(planes * output.iter().product::<usize>());
    let mut argmax = Vec::new();
    for p in 0..planes {
        let src = &x.data()[p * in_plane..(p + 1) * in_plane];
        for z in 0..output[0] {
            for y in 0..output[1] {
                for xo in 0..output[2] {
                    match geom.mode {
                        PoolMode::Max => {
                            let mut best: Option<(usize, T)> = None;
                            window_offsets([z, y, xo], input, geom, |off| {
                                let v = src[off];
                                // strict comparison keeps the first maximum in scan order
                                if best.map_or(true, |(_, b)| v > b) {
                                    best = Some((off, v));
                                }
                            });
                            let (off, v) = best.expect("window covers at least one input element");
                            out.push(v);
                            argmax.push(p * in_plane + off);
                        }
                        PoolMode::Avg => {
                            let mut acc = T::zero();
                            let mut count = 0usize;
                            window_offsets([z, y, xo], input, geom, |off| {
                                acc += src[off];
                                count += 1;
                            });
                            out.push(acc / T::from_f64(count as f64));
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&out_shape, out)?, argmax))
}

pub(crate) fn backward<T: Scalar>(
    in_shape: &[usize],
    up: &Tensor<T>,
    geom: &PoolGeometry,
    argmax: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    match geom.mode {
        PoolMode::Max => {
            let buf = dx.data_mut();
            for (&idx, &g) in argmax.iter().zip(up.data()) {
                buf[idx] += g;
            }
        }
        PoolMode::Avg => {
            let input = [in_shape[2], in_shape[3], in_shape[4]];
            let output = [up.shape()[2], up.shape()[3], up.shape()[4]];
            let in_plane: usize = input.iter().product();
            let out_plane: usize = output.iter().product();
            let buf = dx.data_mut();
            for p in 0..in_shape[0] * in_shape[1] {
                let dst = &mut buf[p * in_plane..(p + 1) * in_plane];
                for z in 0..output[0] {
                    for y in 0..output[1] {
                        for xo in 0..output[2] {
                            let g = up.data()[p * out_plane + (z * output[1] + y) * output[2] + xo];
                            let mut offs = Vec::new();
                            window_offsets([z, y, xo], input, geom, |off| offs.push(off));
                            let share = g / T::from_f64(offs.len() as f64);
                            for off in offs {
                                dst[off] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<T: Scalar> Tape<T> {
    pub fn pool3d(&mut self, input: Var, geom: PoolGeometry) -> Result<Var> {
        let (value, argmax) = forward(self.value(input), &geom)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::Pool { input, geom, argmax }))
    }
}

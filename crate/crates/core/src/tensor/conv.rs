//! Grouped 3D convolution via im2col and GEMM.

use rayon::prelude::*;

use super::tape::{Op, Tape, Var};
use super::{expect_rank, Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride, zero padding and group count of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: [1; 3], pad: [0; 3], groups: 1 }
    }
}

impl ConvGeometry {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad, groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output extent along one axis.
    pub fn out_extent(&self, axis: usize, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad[axis] - kernel) / self.stride[axis] + 1
    }
}

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    groups: usize,
}

impl Dims {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }
    fn patch(&self) -> usize {
        self.cin_g() * self.kernel.iter().product::<usize>()
    }
    fn pointwise(&self, geom: &ConvGeometry) -> bool {
        self.kernel == [1, 1, 1] && geom.stride == [1, 1, 1] && geom.pad == [0, 0, 0]
    }
}

fn resolve(input: &[usize], kernel: &[usize], geom: &ConvGeometry) -> Result<Dims> {
    expect_rank("conv3d input", input, 5)?;
    expect_rank("conv3d kernel", kernel, 5)?;
    let g = geom.groups;
    if g == 0 {
        return Err(Error::Config("conv3d: groups must be positive".into()));
    }
    if geom.stride.iter().any(|&s| s == 0) {
        return Err(Error::Config("conv3d: strides must be positive".into()));
    }
    let (cin, cout) = (input[1], kernel[0]);
    if cin % g != 0 {
        return Err(Error::Divisibility { what: "conv3d input channels".into(), value: cin, divisor: g });
    }
    if cout % g != 0 {
        return Err(Error::Divisibility { what: "conv3d output channels".into(), value: cout, divisor: g });
    }
    if kernel[1] != cin / g {
        return Err(Error::Shape(format!(
            "conv3d: kernel input-channel dimension is {} but input has {cin} channels in {g} groups",
            kernel[1]
        )));
    }
    let mut output = [0; 3];
    for axis in 0..3 {
        let padded = input[2 + axis] + 2 * geom.pad[axis];
        let k = kernel[2 + axis];
        if k > padded {
            let name = ["depth", "height", "width"][axis];
            return Err(Error::Shape(format!(
                "conv3d: kernel {name} {k} exceeds padded input {name} {padded}"
            )));
        }
        output[axis] = (padded - k) / geom.stride[axis] + 1;
    }
    Ok(Dims {
        n: input[0],
        cin,
        cout,
        input: [input[2], input[3], input[4]],
        kernel: [kernel[2], kernel[3], kernel[4]],
        output,
        groups: g,
    })
}

/// Output shape of a convolution, without running it.
pub fn output_shape(input: &[usize], kernel: &[usize], geom: &ConvGeometry) -> Result<Vec<usize>> {
    let d = resolve(input, kernel, geom)?;
    Ok(vec![d.n, d.cout, d.output[0], d.output[1], d.output[2]])
}

/// Unfolds one group of one sample (`cin_g × D × H × W`) into a
/// `patch × out_plane` matrix.
fn im2col<T: Scalar>(x: &[T], d: &Dims, geom: &ConvGeometry, cols: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.output;
    let plane = od * oh * ow;
    for c in 0..d.cin_g() {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for z in 0..od {
                        let zi = (z * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                        let dz = &mut dst[z * oh * ow..(z + 1) * oh * ow];
                        if zi < 0 || zi >= id as isize {
                            dz.fill(T::zero());
                            continue;
                        }
                        let xz = &xc[zi as usize * ih * iw..(zi as usize + 1) * ih * iw];
                        for y in 0..oh {
                            let yi = (y * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                            let dy = &mut dz[y * ow..(y + 1) * ow];
                            if yi < 0 || yi >= ih as isize {
                                dy.fill(T::zero());
                                continue;
                            }
                            let xr = &xz[yi as usize * iw..(yi as usize + 1) * iw];
                            for (x_out, slot) in dy.iter_mut().enumerate() {
                                let xi = (x_out * geom.stride[2] + e) as isize - geom.pad[2] as isize;
                                *slot = if xi < 0 || xi >= iw as isize { T::zero() } else { xr[xi as usize] };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into the input.
fn col2im<T: Scalar>(cols: &[T], d: &Dims, geom: &ConvGeometry, x: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.output;
    let plane = od * oh * ow;
    for c in 0..d.cin_g() {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for z in 0..od {
                        let zi = (z * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                        if zi < 0 || zi >= id as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let yi = (y * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                            if yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let base = (zi as usize * ih + yi as usize) * iw;
                            let sr = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for (x_out, &v) in sr.iter().enumerate() {
                                let xi = (x_out * geom.stride[2] + e) as isize - geom.pad[2] as isize;
                                if xi >= 0 && xi < iw as isize {
                                    xc[base + xi as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let d = resolve(input.shape(), kernel.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(Error::Shape(format!(
                "conv3d: bias shape {:?} does not match {} output channels",
                b.shape(),
                d.cout
            )));
        }
    }
    let in_sample = d.cin * d.in_plane();
    let out_sample = d.cout * d.out_plane();
    let (patch, plane, cin_g, cout_g) = (d.patch(), d.out_plane(), d.cin_g(), d.cout_g());
    let pointwise = d.pointwise(geom);
    let mut out = vec![T::zero(); d.n * out_sample];
    out.par_chunks_mut(out_sample).enumerate().for_each(|(n, y)| {
        let x = &input.data()[n * in_sample..(n + 1) * in_sample];
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); patch * plane] };
        for g in 0..d.groups {
            let xg = &x[g * cin_g * d.in_plane()..(g + 1) * cin_g * d.in_plane()];
            let b_mat: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, &d, geom, &mut cols);
                &cols
            };
            let w = &kernel.data()[g * cout_g * patch..(g + 1) * cout_g * patch];
            let yg = &mut y[g * cout_g * plane..(g + 1) * cout_g * plane];
            T::gemm(cout_g, patch, plane, w, (patch as isize, 1), b_mat, (plane as isize, 1), T::zero(), yg, (plane as isize, 1));
        }
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::new(&[d.n, d.cout, d.output[0], d.output[1], d.output[2]], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
}

pub(crate) fn backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    up: &Tensor<T>,
    geom: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> ConvGrads<T> {
    let d = resolve(input.shape(), kernel.shape(), geom).expect("shapes validated in forward");
    let in_sample = d.cin * d.in_plane();
    let out_sample = d.cout * d.out_plane();
    let (patch, plane, cin_g, cout_g) = (d.patch(), d.out_plane(), d.cin_g(), d.cout_g());
    let pointwise = d.pointwise(geom);
    let kernel_len = kernel.numel();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..d.n)
        .into_par_iter()
        .map(|n| {
            let x = &input.data()[n * in_sample..(n + 1) * in_sample];
            let dy = &up.data()[n * out_sample..(n + 1) * out_sample];
            let mut dx = if want_input { vec![T::zero(); in_sample] } else { Vec::new() };
            let mut dw = if want_kernel { vec![T::zero(); kernel_len] } else { Vec::new() };
            let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); patch * plane] };
            for g in 0..d.groups {
                let dyg = &dy[g * cout_g * plane..(g + 1) * cout_g * plane];
                let w = &kernel.data()[g * cout_g * patch..(g + 1) * cout_g * patch];
                if want_kernel {
                    let xg = &x[g * cin_g * d.in_plane()..(g + 1) * cin_g * d.in_plane()];
                    let b_mat: &[T] = if pointwise {
                        xg
                    } else {
                        im2col(xg, &d, geom, &mut cols);
                        &cols
                    };
                    let dwg = &mut dw[g * cout_g * patch..(g + 1) * cout_g * patch];
                    // dW_g = dY_g · colsᵀ
                    T::gemm(cout_g, plane, patch, dyg, (plane as isize, 1), b_mat, (1, plane as isize), T::zero(), dwg, (patch as isize, 1));
                }
                if want_input {
                    let dxg = &mut dx[g * cin_g * d.in_plane()..(g + 1) * cin_g * d.in_plane()];
                    if pointwise {
                        T::gemm(patch, cout_g, plane, w, (1, patch as isize), dyg, (plane as isize, 1), T::zero(), dxg, (plane as isize, 1));
                    } else {
                        T::gemm(patch, cout_g, plane, w, (1, patch as isize), dyg, (plane as isize, 1), T::zero(), &mut cols, (plane as isize, 1));
                        col2im(&cols, &d, geom, dxg);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let input_grad = want_input.then(|| {
        let mut data = Vec::with_capacity(d.n * in_sample);
        for (dx, _) in &per_sample {
            data.extend_from_slice(dx);
        }
        Tensor::new(input.shape(), data).expect("conv input grad")
    });
    let kernel_grad = want_kernel.then(|| {
        let mut acc = vec![T::zero(); kernel_len];
        for (_, dw) in &per_sample {
            for (a, &b) in acc.iter_mut().zip(dw) {
                *a += b;
            }
        }
        Tensor::new(kernel.shape(), acc).expect("conv kernel grad")
    });
    ConvGrads { input: input_grad, kernel: kernel_grad }
}

pub(crate) fn bias_grad<T: Scalar>(up: &Tensor<T>) -> Tensor<T> {
    let (n, c) = (up.shape()[0], up.shape()[1]);
    let plane = up.numel() / (n * c);
    let mut g = vec![T::zero(); c];
    for s in 0..n {
        for (co, slot) in g.iter_mut().enumerate() {
            let start = (s * c + co) * plane;
            *slot += up.data()[start..start + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], g).expect("bias grad")
}

impl<T: Scalar> Tape<T> {
    /// Grouped 3D convolution of `[N, Cin, D, H, W]` by `[Cout, Cin/g, kd, kh, kw]`
    /// with zero padding.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = forward(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), &geom)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, rg, Op::Conv3d { input, kernel, bias, geom }))
    }
}

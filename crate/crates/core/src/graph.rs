//! Layer descriptions and the two executors that interpret them.
//!
//! Model code is written once against [`Exec`]. [`TapeExec`] runs it on real
//! tensors through the autograd [`Tape`]; [`ShapeTracer`] runs it on shapes
//! alone and records one [`LayerOp`] per layer, which is what the profiler
//! and the parameter enumeration consume.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{conv_output_shape, ConvGeometry, PoolGeometry, Scalar, Tape, Tensor, Var};

/// Parameter initialisation rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He normal over the fan-out, for convs followed by normalisation.
    HeFanOut,
    /// Normal with `std = sqrt(1 / fan_in)`.
    LecunFanIn,
    Normal(f32),
    Constant(f32),
    /// One-hot on the centre tap of each row of a `[C, K]` weight.
    CenterTap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
    pub bias: bool,
    pub init: Init,
    pub bias_init: f32,
}

impl ConvSpec {
    /// Bias-free conv with "same" padding for odd kernels.
    pub fn new(cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel.map(|k| k / 2),
            groups: 1,
            bias: false,
            init: Init::HeFanOut,
            bias_init: 0.0,
        }
    }

    pub fn with_bias(mut self, init: Init, bias_init: f32) -> Self {
        self.bias = true;
        self.init = init;
        self.bias_init = bias_init;
        self
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry { stride: self.stride, pad: self.pad, groups: self.groups }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin / self.groups, self.kernel[0], self.kernel[1], self.kernel[2]]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.cout } else { 0 }
    }
}

/// What a recorded layer computes; consumed by the profiler.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv { kernel: [usize; 3], cin: usize, cout: usize, groups: usize },
    GroupNorm,
    Relu,
    Add,
    Pool { window: [usize; 3] },
    Upsample,
}

/// One executed layer with its input and output shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOp {
    pub name: String,
    pub kind: LayerKind,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    /// Parameters this call reads, `(name, shape, init)`.
    pub params: Vec<ParamSpec>,
}

/// Operations a model needs; implemented once for real tensors and once for
/// shape tracing.
pub trait Exec {
    type Value: Clone;

    fn shape(&self, x: &Self::Value) -> Vec<usize>;
    fn conv(&mut self, name: &str, x: &Self::Value, spec: &ConvSpec) -> Result<Self::Value>;
    /// Group norm; on `[N, C, D, H, W]` each depth plane gets its own
    /// statistics so that slices only interact through depth convolutions.
    fn group_norm(&mut self, name: &str, x: &Self::Value, groups: usize) -> Result<Self::Value>;
    fn relu(&mut self, name: &str, x: &Self::Value) -> Self::Value;
    fn add(&mut self, name: &str, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn pool(&mut self, name: &str, x: &Self::Value, geom: PoolGeometry) -> Result<Self::Value>;
    fn upsample2x(&mut self, name: &str, x: &Self::Value) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn narrow(&mut self, x: &Self::Value, axis: usize, start: usize, len: usize) -> Result<Self::Value>;
    fn permute(&mut self, x: &Self::Value, perm: &[usize]) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[Self::Value], axis: usize) -> Result<Self::Value>;

    /// Group transform: `[N, C, D, H, W]` viewed as `[N, C·D, H, W]` and
    /// mixed by a grouped 1×1 conv with `C` groups of `D` inputs. The
    /// `[C, K]` weight holds one tap per relative depth offset; the centred
    /// `D` taps are used.
    fn group_transform(&mut self, name: &str, x: &Self::Value, max_depth: usize) -> Result<Self::Value>;
}

/// Runs model code on the autograd tape using bound parameters. `T = f64`
/// gives the finite-difference shadow mode of the same model code.
pub struct TapeExec<'a, T: Scalar = f32> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a BoundParams,
}

/// Parameter name → tape variable.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Records every parameter in `store` as a tape leaf.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore, requires_grad: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.cast(), requires_grad)))
            .collect();
        Self { vars }
    }

    /// Records already-converted values, such as an `f64` copy of a store
    /// used for finite differences.
    pub fn bind_values<T: Scalar>(tape: &mut Tape<T>, values: &[(String, Tensor<T>)], requires_grad: bool) -> Self {
        let vars = values.iter().map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad))).collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl<'a, T: Scalar> TapeExec<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a BoundParams) -> Self {
        Self { tape, params }
    }
}

impl<T: Scalar> Exec for TapeExec<'_, T> {
    type Value = Var;

    fn shape(&self, x: &Var) -> Vec<usize> {
        self.tape.shape(*x).to_vec()
    }

    fn conv(&mut self, name: &str, x: &Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let b = if spec.bias { Some(self.params.get(&format!("{name}.bias"))?) } else { None };
        self.tape.conv3d(*x, w, b, spec.geometry())
    }

    fn group_norm(&mut self, name: &str, x: &Var, groups: usize) -> Result<Var> {
        let g = self.params.get(&format!("{name}.weight"))?;
        let b = self.params.get(&format!("{name}.bias"))?;
        if self.tape.shape(*x).len() == 5 {
            self.tape.group_norm_per_slice(*x, g, b, groups)
        } else {
            self.tape.group_norm(*x, g, b, groups)
        }
    }

    fn relu(&mut self, _name: &str, x: &Var) -> Var {
        self.tape.relu(*x)
    }

    fn add(&mut self, _name: &str, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn pool(&mut self, _name: &str, x: &Var, geom: PoolGeometry) -> Result<Var> {
        self.tape.pool3d(*x, geom)
    }

    fn upsample2x(&mut self, _name: &str, x: &Var) -> Result<Var> {
        self.tape.upsample2x_nearest(*x)
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        self.tape.reshape(*x, shape)
    }

    fn narrow(&mut self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.tape.narrow(*x, axis, start, len)
    }

    fn permute(&mut self, x: &Var, perm: &[usize]) -> Result<Var> {
        self.tape.permute(*x, perm)
    }

    fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.tape.concat(xs, axis)
    }

    fn group_transform(&mut self, name: &str, x: &Var, max_depth: usize) -> Result<Var> {
        let depth = self.shape(x).get(2).copied().unwrap_or(0);
        let offset = gtm_tap_offset(depth, max_depth)?;
        let weight = self.params.get(&format!("{name}.weight"))?;
        let bias = self.params.get(&format!("{name}.bias"))?;
        let taps = self.tape.narrow(weight, 1, offset, depth)?;
        crate::backbone::group_transform(self.tape, *x, taps, bias)
    }
}

/// First tap of the centred `depth`-wide window inside a `max_depth`-tap
/// group-transform weight. Even depths (only reachable under isotropic
/// pooling) lean towards the lower taps.
pub fn gtm_tap_offset(depth: usize, max_depth: usize) -> Result<usize> {
    if depth > max_depth {
        return Err(Error::Config(format!(
            "group transform holds {max_depth} taps but the feature depth is {depth}"
        )));
    }
    Ok((max_depth - depth) / 2)
}

/// Runs model code on shapes only, recording every layer.
#[derive(Debug, Default)]
pub struct ShapeTracer {
    pub ops: Vec<LayerOp>,
}

impl ShapeTracer {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&mut self, name: &str, kind: LayerKind, input: &[usize], output: Vec<usize>, params: Vec<ParamSpec>) -> Vec<usize> {
        self.ops.push(LayerOp { name: name.to_string(), kind, input: input.to_vec(), output: output.clone(), params });
        output
    }

    /// Unique parameters in first-use order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut seen = IndexMap::new();
        for op in &self.ops {
            for p in &op.params {
                seen.entry(p.name.clone()).or_insert_with(|| p.clone());
            }
        }
        seen.into_values().collect()
    }
}

impl Exec for ShapeTracer {
    type Value = Vec<usize>;

    fn shape(&self, x: &Vec<usize>) -> Vec<usize> {
        x.clone()
    }

    fn conv(&mut self, name: &str, x: &Vec<usize>, spec: &ConvSpec) -> Result<Vec<usize>> {
        let out = conv_output_shape(x, &spec.weight_shape(), &spec.geometry())?;
        let mut params = vec![ParamSpec { name: format!("{name}.weight"), shape: spec.weight_shape(), init: spec.init }];
        if spec.bias {
            params.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![spec.cout],
                init: Init::Constant(spec.bias_init),
            });
        }
        let kind = LayerKind::Conv { kernel: spec.kernel, cin: spec.cin, cout: spec.cout, groups: spec.groups };
        Ok(self.record(name, kind, x, out, params))
    }

    fn group_norm(&mut self, name: &str, x: &Vec<usize>, groups: usize) -> Result<Vec<usize>> {
        let c = x[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::Divisibility { what: "group_norm channels".into(), value: c, divisor: groups });
        }
        let params = vec![
            ParamSpec { name: format!("{name}.weight"), shape: vec![c], init: Init::Constant(1.0) },
            ParamSpec { name: format!("{name}.bias"), shape: vec![c], init: Init::Constant(0.0) },
        ];
        Ok(self.record(name, LayerKind::GroupNorm, x, x.clone(), params))
    }

    fn relu(&mut self, name: &str, x: &Vec<usize>) -> Vec<usize> {
        self.record(name, LayerKind::Relu, x, x.clone(), Vec::new())
    }

    fn add(&mut self, name: &str, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a != b {
            return Err(Error::Shape(format!("{name}: add of {a:?} and {b:?}")));
        }
        Ok(self.record(name, LayerKind::Add, a, a.clone(), Vec::new()))
    }

    fn pool(&mut self, name: &str, x: &Vec<usize>, geom: PoolGeometry) -> Result<Vec<usize>> {
        let out = geom.output_shape(x)?;
        Ok(self.record(name, LayerKind::Pool { window: geom.window }, x, out, Vec::new()))
    }

    fn upsample2x(&mut self, name: &str, x: &Vec<usize>) -> Result<Vec<usize>> {
        let mut out = x.clone();
        let r = out.len();
        out[r - 2] *= 2;
        out[r - 1] *= 2;
        Ok(self.record(name, LayerKind::Upsample, x, out, Vec::new()))
    }

    fn reshape(&mut self, x: &Vec<usize>, shape: &[usize]) -> Result<Vec<usize>> {
        if x.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("reshape {x:?} -> {shape:?}")));
        }
        Ok(shape.to_vec())
    }

    fn narrow(&mut self, x: &Vec<usize>, axis: usize, start: usize, len: usize) -> Result<Vec<usize>> {
        if axis >= x.len() || start + len > x[axis] {
            return Err(Error::Shape(format!("narrow {start}+{len} on axis {axis} of {x:?}")));
        }
        let mut out = x.clone();
        out[axis] = len;
        Ok(out)
    }

    fn permute(&mut self, x: &Vec<usize>, perm: &[usize]) -> Result<Vec<usize>> {
        Ok(perm.iter().map(|&p| x[p]).collect())
    }

    fn concat(&mut self, xs: &[Vec<usize>], axis: usize) -> Result<Vec<usize>> {
        let mut out = xs.first().cloned().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        out[axis] = xs.iter().map(|s| s[axis]).sum();
        Ok(out)
    }

    fn group_transform(&mut self, name: &str, x: &Vec<usize>, max_depth: usize) -> Result<Vec<usize>> {
        let [n, c, d, h, w] = x[..] else {
            return Err(Error::Shape(format!("group transform expects [N,C,D,H,W], got {x:?}")));
        };
        gtm_tap_offset(d, max_depth)?;
        let params = vec![
            ParamSpec { name: format!("{name}.weight"), shape: vec![c, max_depth], init: Init::CenterTap },
            ParamSpec { name: format!("{name}.bias"), shape: vec![c], init: Init::Constant(0.0) },
        ];
        let kind = LayerKind::Conv { kernel: [1, 1, 1], cin: c * d, cout: c, groups: c };
        let input = vec![n, c * d, 1, h, w];
        Ok(self.record(name, kind, &input, vec![n, c, h, w], params))
    }
}

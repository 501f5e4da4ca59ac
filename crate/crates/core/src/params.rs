//! Named parameter storage and initialisation.

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Init, ParamSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ordered map from hierarchical parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter in `specs` order from `rng`.
    pub fn initialize(specs: &[ParamSpec], rng: &mut Rng) -> Self {
        let mut store = Self::new();
        for spec in specs {
            store.tensors.insert(spec.name.clone(), init_tensor(spec, rng));
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }
}

fn init_tensor(spec: &ParamSpec, rng: &mut Rng) -> Tensor {
    let shape = &spec.shape;
    let normal = |std: f32, rng: &mut Rng| {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    };
    match spec.init {
        Init::Constant(v) => Tensor::full(shape, v),
        Init::Normal(std) => normal(std, rng),
        Init::HeFanOut => {
            // Conv weight [Cout, Cin/g, kd, kh, kw].
            let fan_out = shape[0] * shape[2..].iter().product::<usize>();
            normal((2.0 / fan_out as f32).sqrt(), rng)
        }
        Init::LecunFanIn => {
            let fan_in: usize = shape[1..].iter().product();
            normal((1.0 / fan_in as f32).sqrt(), rng)
        }
        Init::CenterTap => {
            let k = shape[1];
            Tensor::from_fn(shape, |i| if i % k == k / 2 { 1.0 } else { 0.0 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn spec(name: &str, shape: &[usize], init: Init) -> ParamSpec {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init }
    }

    #[test]
    fn initialisation_is_seeded() {
        let specs = [spec("a.weight", &[8, 4, 1, 3, 3], Init::HeFanOut), spec("a.bias", &[8], Init::Constant(0.5))];
        let x = ParamStore::initialize(&specs, &mut stream(3, "init"));
        let y = ParamStore::initialize(&specs, &mut stream(3, "init"));
        assert_eq!(x, y);
        assert!(x.get("a.bias").unwrap().data().iter().all(|&v| v == 0.5));
        assert_eq!(x.num_elements(), 8 * 4 * 9 + 8);
    }

    #[test]
    fn center_tap_is_one_hot() {
        let s = ParamStore::initialize(&[spec("g", &[2, 5], Init::CenterTap)], &mut stream(0, "init"));
        assert_eq!(s.get("g").unwrap().data(), &[0., 0., 1., 0., 0., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]));
        assert!(matches!(s.set("w", Tensor::zeros(&[3])), Err(Error::ParamShape { .. })));
    }
}

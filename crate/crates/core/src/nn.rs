//! Named parameter storage and the small layer types built on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor<T>) -> Tensor<T> {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, t.clone()));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies values from `other` by name; shapes must match exactly.
    pub fn load_from(&self, other: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::shape(
                "load parameters",
                format!("expected {} tensors, got {}", self.entries.len(), other.len()),
            ));
        }
        for (name, shape, data) in other {
            let t = self
                .get(name)
                .ok_or_else(|| Error::shape("load parameters", format!("unknown parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "load parameters",
                    format!("{name}: expected {:?}, got {shape:?}", t.shape()),
                ));
            }
            t.set_data(data.clone())?;
        }
        Ok(())
    }
}

/// Deterministic parameter initializer that registers what it creates.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut self.rng))).collect();
        self.param(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        self.param(name, vec![T::from_f64_lossy(value); n], shape)
    }

    pub fn param(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Tensor<T> {
        let t = Tensor::parameter(data, shape).expect("initializer shape");
        self.store.register(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(init: &mut Init<'_, T>, name: &str, n_in: usize, n_out: usize, bias: bool) -> Self {
        let weight = init.normal(&format!("{name}.weight"), &[n_in, n_out], (1.0 / n_in as f64).sqrt());
        let bias = bias.then(|| init.constant(&format!("{name}.bias"), &[n_out], 0.0));
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, self.bias.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        Self {
            kernel: init.normal(&format!("{name}.weight"), &[c_out, c_in, k, k], (2.0 / fan_in).sqrt()),
            bias: init.constant(&format!("{name}.bias"), &[c_out], 0.0),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.kernel, Some(&self.bias), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init<'_, T>, name: &str, width: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), &[width], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[width], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, T::from_f64_lossy(Self::EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_registers_names() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        Linear::new(&mut Init::new(&mut a, 7), "l", 3, 4, true);
        Linear::new(&mut Init::new(&mut b, 7), "l", 3, 4, true);
        assert_eq!(a.len(), 2);
        assert_eq!(a.get("l.weight").unwrap().to_vec(), b.get("l.weight").unwrap().to_vec());
        assert_eq!(a.get("l.bias").unwrap().to_vec(), vec![0.0; 4]);
        assert_eq!(a.num_scalars(), 16);
    }

    #[test]
    fn load_checks_shapes() {
        let mut s = ParamStore::<f32>::new();
        Init::new(&mut s, 0).constant("w", &[2], 1.0);
        assert!(s.load_from(&[("w".into(), vec![3], vec![0.0; 3])]).is_err());
        s.load_from(&[("w".into(), vec![2], vec![5.0, 6.0])]).unwrap();
        assert_eq!(s.get("w").unwrap().to_vec(), vec![5.0, 6.0]);
    }
}

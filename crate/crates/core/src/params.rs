//! Named trainable tensors and their binding onto a tape.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Initialization rule for one parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every trainable tensor of a model, keyed by dotted path
/// (`vfe.local_rgb.block0.attn.wq`). Iteration order is lexicographic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Initialize from specs, drawing values in spec order from one seeded
    /// stream. The same seed yields the same values for `f32` and `f64`
    /// stores up to rounding.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            let values: Vec<T> = (0..spec.numel())
                .map(|_| T::lit(sample_init(spec.init, &mut rng)))
                .collect();
            let tensor = Tensor::new(spec.shape.clone(), values).expect("spec shape");
            store.insert(spec.name.clone(), tensor);
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zero every parameter whose path starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(T::zero());
            }
        }
    }
}

fn sample_init(init: Init, rng: &mut ChaCha8Rng) -> f64 {
    match init {
        Init::Zeros => 0.0,
        Init::Ones => 1.0,
        Init::TruncNormal(std) => loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        },
        Init::Xavier { fan_in, fan_out } => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.random_range(-bound..bound)
        }
    }
}

/// A tape plus lazily bound parameters for one forward pass.
pub struct Graph<'p, T> {
    tape: Tape<T>,
    store: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
    track_grads: bool,
}

impl<'p, T: Element> Graph<'p, T> {
    /// Graph whose parameters receive gradients.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            track_grads: true,
        }
    }

    /// Graph for evaluation; nothing requires a gradient.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Graph {
            track_grads: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    /// Tape node for a named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.tape.leaf(value, self.track_grads);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    /// Names of parameters touched by the forward pass so far.
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Gradient for every stored parameter; untouched parameters get zeros.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads: Gradients<T> = self.tape.backward(loss)?;
        Ok(self
            .store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect())
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic_and_dtype_consistent() {
        let specs = vec![
            ParamSpec::new("a", [3, 4], Init::TruncNormal(0.02)),
            ParamSpec::new("b", [4], Init::Xavier { fan_in: 3, fan_out: 4 }),
            ParamSpec::new("c", [2], Init::Ones),
        ];
        let p1 = ParamStore::<f32>::init(&specs, 7);
        let p2 = ParamStore::<f32>::init(&specs, 7);
        let p3 = ParamStore::<f32>::init(&specs, 8);
        assert_eq!(p1, p2);
        assert_ne!(p1, p3);
        let p64 = ParamStore::<f64>::init(&specs, 7);
        assert_eq!(p64.cast::<f32>(), p1);
        assert!(p64.get("a").unwrap().data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn unbound_params_get_zero_grads() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::scalar(3.0));
        store.insert("unused", Tensor::ones([2]));
        let mut g = Graph::new(&store);
        let x = g.param("x").unwrap();
        let y = g.sum_squares(x).unwrap();
        let grads = g.param_grads(y).unwrap();
        assert_eq!(grads["x"].item(), 6.0);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
        assert!(matches!(g.param("nope"), Err(Error::MissingParam(_))));
    }
}

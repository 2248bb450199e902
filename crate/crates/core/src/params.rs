//! Named learnable tensors and their binding onto a graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±gain * sqrt(3 / fan_in)`.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(key: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            key: key.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Convolution weight and bias specs under `prefix.weight` / `prefix.bias`.
pub fn conv_specs(prefix: &str, c_out: usize, c_in: usize, k: usize, gain: f64) -> [ParamSpec; 2] {
    let fan_in = c_in * k * k;
    [
        ParamSpec::new(
            format!("{prefix}.weight"),
            &[c_out, c_in, k, k],
            Init::FanIn { fan_in, gain },
        ),
        ParamSpec::new(format!("{prefix}.bias"), &[c_out], Init::Zeros),
    ]
}

/// Learnable tensors keyed by module path.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    /// Draws every spec from one seeded stream in key order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.key.cmp(&b.key));
        let mut tensors = BTreeMap::new();
        for s in sorted {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Constant(v) => Tensor::from_fn(&s.shape, |_| T::of(v)),
                Init::FanIn { fan_in, gain } => {
                    let bound = gain * (3.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| T::of(rng.gen_range(-bound..=bound)))
                }
            };
            tensors.insert(s.key.clone(), t);
        }
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<T>> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(key.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Checks keys and shapes against `specs`.
    pub fn matches(&self, specs: &[ParamSpec]) -> std::result::Result<(), String> {
        if specs.len() != self.tensors.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            ));
        }
        for s in specs {
            match self.tensors.get(&s.key) {
                None => return Err(format!("missing tensor {}", s.key)),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(format!("{}: expected {:?}, found {:?}", s.key, s.shape, t.shape()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Records every tensor as a parameter leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Gradients after `g.backward`, zeros for parameters the loss ignored.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> BTreeMap<String, Vec<T>> {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let grad = bound
                    .vars
                    .get(k)
                    .and_then(|&v| g.grad(v))
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); t.numel()]);
                (k.clone(), grad)
            })
            .collect()
    }
}

/// Parameter handles on one graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, key: &str) -> Result<Var> {
        self.vars.get(key).copied().ok_or_else(|| TensorError::Parameter {
            op: "bind",
            msg: format!("unknown parameter {key}"),
        })
    }

    pub fn insert(&mut self, key: impl Into<String>, v: Var) {
        self.vars.insert(key.into(), v);
    }

    /// Conv with weights under `prefix`.
    pub fn conv<T: Real>(&self, g: &mut Graph<T>, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        g.conv2d(x, w, Some(b), stride, pad)
    }
}

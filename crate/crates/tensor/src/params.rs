use std::collections::BTreeMap;

use rand::Rng;

use crate::backward::Gradients;
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over the first two extents (fan-in, fan-out).
    Xavier,
    Uniform(f64),
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::full(shape.to_vec(), F::one()),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [n] => (1, *n),
                    [a, b, ..] => (*a, *b),
                    [] => (1, 1),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| F::lit(rng.gen_range(-bound..bound)))
            }
            Init::Uniform(bound) => Tensor::from_fn(shape.to_vec(), |_| F::lit(rng.gen_range(-bound..bound))),
        };
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    /// Replaces a value, keeping the declared shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Mutable access to every tensor, in store order.
    pub fn values_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.values.iter_mut().collect()
    }

    pub fn values(&self) -> Vec<&Tensor<F>> {
        self.values.iter().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// A tape with every parameter of a store recorded as a leaf.
pub struct Graph<F> {
    pub tape: Tape<F>,
    params: Vec<Var>,
}

impl<F: Real> Graph<F> {
    pub fn new(store: &ParamStore<F>, requires_grad: bool) -> Self {
        let mut tape = Tape::new();
        let params = store
            .values
            .iter()
            .map(|v| tape.leaf(v.clone(), requires_grad))
            .collect();
        Self { tape, params }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Per-parameter gradients, in store order.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<Tensor<F>> {
        self.params.iter().map(|&v| grads.wrt(v)).collect()
    }
}

impl<F> std::ops::Deref for Graph<F> {
    type Target = Tape<F>;
    fn deref(&self) -> &Tape<F> {
        &self.tape
    }
}

impl<F> std::ops::DerefMut for Graph<F> {
    fn deref_mut(&mut self) -> &mut Tape<F> {
        &mut self.tape
    }
}

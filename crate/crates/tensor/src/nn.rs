//! Parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{AttnShape, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, Init::Xavier, rng)
    }

    pub fn with_init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.init(format!("{name}.weight"), &[in_dim, out_dim], init, rng)?;
        let bias = store.init(format!("{name}.bias"), &[out_dim], Init::Zeros, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            gain: store.init(format!("{name}.gain"), &[dim], Init::Ones, rng)?,
            bias: store.init(format!("{name}.bias"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, w, b, F::lit(Self::EPS))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<F: Real>(self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, activation })
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < n {
                x = self.activation.apply(g, x)?;
            }
        }
        Ok(x)
    }
}

/// Inputs to [`MultiHeadAttention::forward`]. Rows of `queries` are grouped
/// into `batches` equal blocks, and each block attends only to the matching
/// block of `keys`/`values`.
pub struct AttnInput {
    pub queries: Var,
    pub keys: Var,
    pub values: Var,
    pub query_pos: Option<Var>,
    pub key_pos: Option<Var>,
    pub batches: usize,
}

pub struct AttnOutput {
    pub output: Var,
    /// Node carrying the attention probabilities.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!(
                "channel width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    /// Positional terms are added to queries and keys before projection;
    /// values never see them.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, input: &AttnInput) -> Result<AttnOutput> {
        let q_in = match input.query_pos {
            Some(p) => g.add(input.queries, p)?,
            None => input.queries,
        };
        let k_in = match input.key_pos {
            Some(p) => g.add(input.keys, p)?,
            None => input.keys,
        };
        let q = self.q.forward(g, q_in)?;
        let k = self.k.forward(g, k_in)?;
        let v = self.v.forward(g, input.values)?;
        let b = input.batches.max(1);
        let shape = AttnShape {
            batches: b,
            heads: self.heads,
            q_len: g.shape(q)[0] / b,
            k_len: g.shape(k)[0] / b,
        };
        let weights = g.attention(q, k, v, shape)?;
        let output = self.out.forward(g, weights)?;
        Ok(AttnOutput { output, weights })
    }
}

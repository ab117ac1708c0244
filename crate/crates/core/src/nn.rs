//! Named parameter storage and the dense layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Activation, Array, Real, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    /// Total trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::format(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::format(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps vars already on a tape, in parameter order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot uniform.
    Xavier,
    Zeros,
    Uniform(Real),
}

pub fn init_array(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Array {
    let n: usize = shape.iter().product();
    let bound = match init {
        Init::Zeros => return Array::zeros(shape),
        Init::Uniform(b) => b,
        Init::Xavier => {
            let (fan_in, fan_out) = match shape {
                [i, o] => (*i, *o),
                [o] => (1, *o),
                _ => (n, n),
            };
            (6.0 / (fan_in + fan_out).max(1) as Real).sqrt()
        }
    };
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Array::new(shape.to_vec(), data).expect("init shape")
}

/// `y = x W + b`, with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_array(rng, &[in_dim, out_dim], init));
        let bias = store.add(format!("{name}.bias"), Array::zeros(&[out_dim]));
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_array(rng, &[in_dim, out_dim], init));
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let y = x.matmul(&p.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(&p.get(b)),
            None => Ok(y),
        }
    }

    /// Zeroes weight and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in std::iter::once(self.weight).chain(self.bias) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Array::zeros(&shape);
        }
    }
}

/// Two-layer perceptron `in → hidden → out` with one activation between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
    pub act: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        act: Activation,
        last: Init,
    ) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.0"), in_dim, hidden, Init::Xavier),
            second: Linear::new(store, rng, &format!("{name}.1"), hidden, out_dim, last),
            act,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = self.first.forward(p, x)?.act(self.act)?;
        self.second.forward(p, h)
    }
}

use std::collections::BTreeMap;

use rand::Rng;

use super::{NumericError, Tensor};

/// Half-width of the uniform initializer for embedding tables.
pub const EMBED_SCALE: f64 = 1.0;

/// How a parameter tensor starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `[-a, a]`.
    Uniform(f64),
    /// Uniform on `[-a, a]` with `a = sqrt(6 / (rows + cols))`, for a
    /// `[rows, cols]` weight matrix applied as `x @ W`.
    Glorot,
}

/// `(name, shape, init)` for every parameter of a model.
pub type Layout = Vec<(String, Vec<usize>, Init)>;

/// A store holding freshly initialized tensors for `layout`, drawn in
/// layout order.
pub fn init_layout<R: Rng + ?Sized>(layout: &[(String, Vec<usize>, Init)], rng: &mut R) -> Result<ParamStore, NumericError> {
    let mut p = ParamStore::new();
    for (name, shape, init) in layout {
        match *init {
            Init::Zeros => p.init_zeros(name.clone(), shape)?,
            Init::Constant(c) => p.insert(name.clone(), Tensor::filled(shape, c))?,
            Init::Uniform(a) => p.init_uniform(name.clone(), shape, a, rng)?,
            Init::Glorot => {
                let fan: usize = if shape.len() == 2 { shape[0] + shape[1] } else { 2 * shape[0] };
                p.init_uniform(name.clone(), shape, (6.0 / fan as f64).sqrt(), rng)?
            }
        }
    }
    Ok(p)
}

/// Checks that `actual` holds exactly the tensors of `layout`, with the
/// same shapes.
pub fn check_layout(layout: &[(String, Vec<usize>, Init)], actual: &ParamStore) -> Result<(), NumericError> {
    for (name, shape, _) in layout {
        let got = actual.get(name)?;
        if got.shape() != shape.as_slice() {
            return Err(NumericError::Shape {
                op: "parameter layout",
                lhs: got.shape().to_vec(),
                rhs: shape.clone(),
            });
        }
    }
    if actual.len() != layout.len() {
        let extra = actual
            .names()
            .find(|n| !layout.iter().any(|(name, _, _)| name == n))
            .unwrap_or_default();
        return Err(NumericError::UnknownParam(extra.to_string()));
    }
    Ok(())
}

/// Named trainable parameters. Iteration order is by name, so every
/// traversal (checkpointing, updates) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), NumericError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(NumericError::DuplicateParam(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Adds a tensor drawn uniformly from `[-scale, scale]`.
    pub fn init_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<(), NumericError> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<(), NumericError> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NumericError::UnknownParam(name.to_string()))
    }

    /// Mutable access to a tensor's values. The shape stays fixed.
    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64], NumericError> {
        self.tensors
            .get_mut(name)
            .map(|t| t.data_mut())
            .ok_or_else(|| NumericError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sets every value of every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().fill(0.0);
        }
    }
}

/// Gradients keyed like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// All-zero gradients mirroring `store`.
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            tensors: store
                .iter()
                .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NumericError::UnknownParam(name.to_string()))
    }

    pub(crate) fn accumulate(&mut self, name: &str, values: &[f64]) -> Result<(), NumericError> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| NumericError::UnknownParam(name.to_string()))?;
        for (dst, src) in t.data_mut().iter_mut().zip(values) {
            *dst += src;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<(), NumericError> {
        for (name, t) in &other.tensors {
            self.accumulate(name, t.data())?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// `p <- p - lr * g` for every parameter. Ascent is obtained by passing
/// negated gradients.
pub fn sgd_step(params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), NumericError> {
    for name in grads.tensors.keys() {
        if !params.tensors.contains_key(name) {
            return Err(NumericError::UnknownParam(name.clone()));
        }
    }
    for (name, p) in params.tensors.iter_mut() {
        let g = grads
            .tensors
            .get(name)
            .ok_or_else(|| NumericError::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(NumericError::Shape {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

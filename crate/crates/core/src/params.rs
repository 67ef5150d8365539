//! Named trainable parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether L2 weight decay applies (weight matrices and embeddings, not biases).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: &Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        slot.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Snapshot of all parameters as `(prefix + name, f32 tensor)` pairs.
    pub fn export_named(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.value.cast()))
            .collect()
    }

    /// Load values by name (after stripping `prefix`); every parameter must be present.
    pub fn import_named(&mut self, prefix: &str, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::UnknownParameter(key.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "import",
                    left: p.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

/// Glorot-uniform initialisation for a `[rows, cols]` weight.
pub fn xavier_uniform<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, vec![rows, cols], -bound, bound)
}

pub fn uniform<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

use super::Tensor;
use crate::error::{Error, Result};

/// An ordered collection of named tensors.
///
/// Used both for the trainable parameters of a model and for gradients,
/// perturbations and landscape directions, which must share the parameter
/// layout tensor-for-tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Trainable parameter collection.
pub type ParamSet = TensorSet;
/// Gradient (or perturbation) collection congruent to a [`ParamSet`].
pub type GradSet = TensorSet;

impl TensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn is_congruent(&self, other: &TensorSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    fn check_congruent(&self, other: &TensorSet, op: &'static str) -> Result<()> {
        if !self.is_congruent(other) {
            return Err(Error::shape(op, "tensor sets have different layouts"));
        }
        Ok(())
    }

    /// Global L2 norm over every tensor concatenated.
    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &TensorSet) -> Result<f64> {
        self.check_congruent(other, "dot")?;
        let mut acc = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            acc += a.dot(b)?;
        }
        Ok(acc)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.scaled(factor)).collect(),
        }
    }

    /// `self + other`, elementwise.
    pub fn added(&self, other: &TensorSet) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &TensorSet) -> Result<()> {
        self.check_congruent(other, "axpy")?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Flattened copy of every value, in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

use std::collections::HashMap;

use super::real::Real;
use super::tensor::Tensor;
use super::TensorError;

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Adds a parameter; replacing an existing name keeps its position.
    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        match self.index.get(name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Zero-filled buffers shaped like every parameter, for gradient sums.
    pub fn zeros_like(&self) -> ParamStore<f64> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape()));
        }
        out
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout<U: Real>(&self, other: &ParamStore<U>) -> Result<(), TensorError> {
        if self.names != other.names {
            return Err(TensorError::InvalidArgument("parameter names differ".into()));
        }
        for ((_, a), (_, b)) in self.iter().zip(other.iter()) {
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch { op: "parameter layout", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
            }
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

/// A named, shaped block of `f32` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// An ordered collection of tensors; layers refer to entries by index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub tensors: Vec<NamedTensor>,
}

impl ParamStore {
    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor { name, shape, data });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(NamedTensor::numel).sum()
    }

    pub fn data(&self, idx: usize) -> &[f32] {
        &self.tensors[idx].data
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut [f32] {
        &mut self.tensors[idx].data
    }

    pub fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Checks that `other` has the same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len())
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, idx: usize) -> &[f32] {
        &self.tensors[idx]
    }

    pub(crate) fn get_mut(&mut self, idx: usize) -> &mut [f32] {
        &mut self.tensors[idx]
    }

    pub fn is_all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

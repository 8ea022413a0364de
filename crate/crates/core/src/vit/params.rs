//! Named, flat `f64` tensors.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor size mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Fixed buffers (e.g. sin-cos position tables) are stored but never updated.
    pub trainable: bool,
}

/// Ordered map from unique names to tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// # Panics
    /// If `name` is already present.
    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let t = self.tensor(id);
        assert_eq!(t.shape.len(), 2, "{} is not a matrix", self.name(id));
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("contiguous matrix")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let t = &mut self.entries[id.0].tensor;
        assert_eq!(t.shape.len(), 2);
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("contiguous matrix")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensor(id).data[..])
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.entries[id.0].tensor.data[..])
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(&e.tensor.shape),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Element-wise `self += other`, entry by entry in store order.
    pub fn add_assign(&mut self, other: &ParameterStore) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.tensor.data.iter_mut().zip(&b.tensor.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for e in &mut self.entries {
            for x in &mut e.tensor.data {
                *x *= factor;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Flat `(entry, offset)` address of the `index`-th scalar.
    pub fn locate(&self, mut index: usize) -> Option<(ParamId, usize)> {
        for (i, e) in self.entries.iter().enumerate() {
            if index < e.tensor.len() {
                return Some((ParamId(i), index));
            }
            index -= e.tensor.len();
        }
        None
    }

    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.shape == b.tensor.shape)
    }
}

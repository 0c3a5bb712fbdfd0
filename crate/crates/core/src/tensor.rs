//! Flat f32 tensors and named parameter sets.

use std::hash::Hasher;

use fnv::FnvHasher;
use thiserror::Error;

use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} describes {expected} elements but data has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
}

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuf {
    data: Vec<f32>,
    shape: Vec<usize>,
}

impl TensorBuf {
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { data, shape })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Self {
        let shape = vec![data.len()];
        Self { data, shape }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Fails on the first NaN or infinity.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        check_finite(&self.data)
    }

    pub fn l2_norm(&self) -> f64 {
        par::sum_squares(Execution::default(), &self.data).sqrt()
    }
}

pub(crate) fn check_finite(data: &[f32]) -> Result<(), TensorError> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(TensorError::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: TensorBuf,
}

/// Model parameters (or gradients) as an ordered list of named layers.
///
/// Layers are the unit for LAMB trust ratios and for codec scheme selection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    layers: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new(layers: Vec<NamedTensor>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: TensorBuf) {
        self.layers.push(NamedTensor {
            name: name.into(),
            tensor,
        });
    }

    pub fn layers(&self) -> &[NamedTensor] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.layers.iter().map(|l| l.tensor.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| NamedTensor {
                    name: l.name.clone(),
                    tensor: TensorBuf::zeros(l.tensor.shape()),
                })
                .collect(),
        }
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<(), TensorError> {
        if self.layers.len() != other.layers.len() {
            return Err(TensorError::LayoutMismatch(format!(
                "{} layers vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.tensor.shape() != b.tensor.shape() {
                return Err(TensorError::LayoutMismatch(format!(
                    "layer {}: {:?} vs {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        self.layers.iter().try_for_each(|l| l.tensor.check_finite())
    }

    /// All elements concatenated in layer order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_elements());
        for l in &self.layers {
            out.extend_from_slice(l.tensor.data());
        }
        out
    }

    /// FNV-1a 64 over the little-endian bytes of every element, layer order.
    pub fn hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        for l in &self.layers {
            for x in l.tensor.data() {
                h.write(&x.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Largest elementwise absolute difference; layouts must match.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.tensor.data().iter().zip(b.tensor.data()))
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .fold(0.0, f64::max)
    }
}

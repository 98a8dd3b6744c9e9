use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
///
/// Insertion order is the binding order on a tape; names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    params: BTreeMap<String, StoredTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor and returns its index. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)`.
    pub fn insert_random(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let std = 1.0 / (rows.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor2::from_vec(rows, cols, data).expect("shape"))
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

    pub fn tensors(&self) -> &[Tensor2] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor2] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor2::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor2::is_finite)
    }

    /// Serializes to the checkpoint JSON layout, keys sorted by name.
    pub fn to_json(&self, format: &str) -> Result<String> {
        let params = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                (
                    n.clone(),
                    StoredTensor {
                        shape: [t.rows(), t.cols()],
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        let ckpt = Checkpoint {
            format: format.to_string(),
            params,
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    /// Loads values into an existing store. Names and shapes must match exactly.
    pub fn load_json(&mut self, json: &str, format: &str) -> Result<()> {
        let ckpt: Checkpoint = serde_json::from_str(json)?;
        if ckpt.format != format {
            return Err(Error::data(format!(
                "checkpoint format {:?}, expected {format:?}",
                ckpt.format
            )));
        }
        if ckpt.params.len() != self.len() {
            return Err(Error::data(format!(
                "checkpoint has {} tensors, model has {}",
                ckpt.params.len(),
                self.len()
            )));
        }
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            let stored = ckpt
                .params
                .get(name)
                .ok_or_else(|| Error::data(format!("checkpoint lacks tensor {name}")))?;
            if stored.shape != [tensor.rows(), tensor.cols()] {
                return Err(Error::data(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    stored.shape,
                    tensor.shape()
                )));
            }
            *tensor = Tensor2::from_vec(stored.shape[0], stored.shape[1], stored.values.clone())?;
            if !tensor.is_finite() {
                return Err(Error::Numeric(format!("tensor {name} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, format: &str) -> Result<()> {
        std::fs::write(path, self.to_json(format)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path, format: &str) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.load_json(&text, format)
    }
}

//! Named parameter storage.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Glorot uniform.
    Xavier,
    Zeros,
    Ones,
}

impl Init {
    pub(crate) fn sample(self, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        match self {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Xavier => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[doc(hidden)]
pub struct RawEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Learnable weights keyed by layer path, in creation order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<RawEntry>", into = "Vec<RawEntry>")]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl From<Vec<RawEntry>> for ModelParams {
    fn from(raw: Vec<RawEntry>) -> Self {
        let mut p = ModelParams::default();
        for e in raw {
            let arr = Array2::from_shape_vec((e.rows, e.cols), e.data)
                .unwrap_or_else(|_| Array2::from_elem((e.rows, e.cols), f64::NAN));
            p.insert(e.name, arr);
        }
        p
    }
}

impl From<ModelParams> for Vec<RawEntry> {
    fn from(p: ModelParams) -> Self {
        p.names
            .into_iter()
            .zip(p.values)
            .map(|(name, v)| RawEntry {
                name,
                rows: v.nrows(),
                cols: v.ncols(),
                data: v.iter().copied().collect(),
            })
            .collect()
    }
}

impl ModelParams {
    pub fn insert(&mut self, name: String, value: Array2<f64>) -> usize {
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return i;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.lookup(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.lookup(name).map(move |i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Array2<f64> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Zero-filled arrays matching every parameter's shape.
    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.dim())).collect()
    }
}

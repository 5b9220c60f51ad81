//! Named parameter arrays shared by every model in the crate.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Number of parameter arrays.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, v)| v.len())
            .sum()
    }

    /// Copies every array whose name also exists in `other` with the same shape.
    /// Returns the number of arrays copied.
    pub fn copy_matching(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, &id) in &self.index {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(src) = other.find(name) {
                let src = other.get(src);
                let dst = &mut self.values[id.0];
                if src.dim() != dst.dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter {name}: expected {:?}, found {:?}",
                        dst.dim(),
                        src.dim()
                    )));
                }
                dst.assign(src);
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Deterministic parameter initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Glorot-uniform weights for a `fan_in × fan_out` projection.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Matrix {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Matrix::from_shape_fn((fan_in, fan_out), |_| self.rng.random_range(-a..a))
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let dist = Normal::new(0.0, std).expect("valid std");
        Matrix::from_shape_fn((rows, cols), |_| dist.sample(self.rng))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Matrix {
        Matrix::zeros((rows, cols))
    }

    pub fn ones(&self, rows: usize, cols: usize) -> Matrix {
        Matrix::ones((rows, cols))
    }
}

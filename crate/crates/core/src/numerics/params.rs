use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors with gradient accumulators of identical shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.grads.push(Matrix::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Uniform `[-scale, scale]` initialisation.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    /// Glorot-uniform weight matrix multiplied by `gain`.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let scale = gain * (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, rows, cols, scale, rng)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        self.grads[id.0].add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// `(name, value)` pairs in registration order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (&mut Matrix, &Matrix)> {
        self.values.iter_mut().zip(self.grads.iter())
    }

    /// Overwrites values from another store with the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for (name, value) in other.entries() {
            let id = self.id(name).ok_or_else(|| format!("unknown parameter {name}"))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                ));
            }
            self.values[id.0] = value.clone();
        }
        if other.len() != self.len() {
            return Err(format!("expected {} parameters, got {}", self.len(), other.len()));
        }
        Ok(())
    }
}

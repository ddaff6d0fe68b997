use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::Matrix;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to one named weight matrix inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named learnable matrices.
///
/// Every store carries a process-unique id so a graph can bind parameters from
/// several stores at once without mixing up their gradients. Clones get a new id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a new parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Overwrites a parameter's value; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<(), String> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.names[id.0],
                current.shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Copies every parameter from `named` whose name matches; returns the
    /// names that differ in shape, and fails if any name is missing here.
    pub fn load_named<'a>(
        &mut self,
        named: impl IntoIterator<Item = (&'a str, &'a Matrix)>,
    ) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        for (name, value) in named {
            match self.index.get(name) {
                None => problems.push(format!("{name}: not present in model")),
                Some(&i) => {
                    let want = self.values[i].shape();
                    if want != value.shape() {
                        problems.push(format!("{name}: expected {want:?}, found {:?}", value.shape()));
                    } else {
                        self.values[i] = value.clone();
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Per-parameter gradients for a single store, aligned with its ids.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreGrads {
    grads: Vec<Matrix>,
}

impl StoreGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub(crate) fn from_vec(grads: Vec<Matrix>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.grads.iter()
    }

    pub fn add_assign(&mut self, other: &StoreGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Ordered list of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Registers every parameter as a leaf. `trainable = false` binds constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.var(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Flattens all entries in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.count(), "flat parameter length mismatch");
        let mut k = 0;
        for v in &mut self.values {
            for a in v.iter_mut() {
                *a = flat[k];
                k += 1;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|a| a.is_finite()))
    }

    /// Entries with a key prefix prepended, for checkpoint namespaces.
    pub fn to_entries(&self, prefix: &str) -> BTreeMap<String, ArrayEntry> {
        self.iter()
            .map(|(n, v)| (format!("{prefix}{n}"), ArrayEntry::from(v)))
            .collect()
    }

    /// Loads values for every parameter from `entries`, requiring exact shapes.
    pub fn load_entries(&mut self, prefix: &str, entries: &BTreeMap<String, ArrayEntry>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let key = format!("{prefix}{name}");
            let entry = entries
                .get(&key)
                .ok_or_else(|| Error::Schema(format!("checkpoint is missing `{key}`")))?;
            let loaded = entry.to_array()?;
            if loaded.dim() != value.dim() {
                return Err(Error::Schema(format!(
                    "`{key}` has shape {:?}, model expects {:?}",
                    loaded.dim(),
                    value.dim()
                )));
            }
            *value = loaded;
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Reads gradient values for each bound parameter.
    pub fn gradients(&self, tape: &mut Tape, loss: Var) -> Result<Vec<Mat>> {
        let grads = tape.grad(loss, &self.vars)?;
        Ok(grads.into_iter().map(|g| tape.value(g).clone()).collect())
    }
}

/// Serialized matrix: shape plus row-major data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl From<&Mat> for ArrayEntry {
    fn from(m: &Mat) -> Self {
        ArrayEntry {
            shape: [m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }
}

impl ArrayEntry {
    pub fn to_array(&self) -> Result<Mat> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone()).map_err(|_| {
            Error::Schema(format!(
                "array data length {} does not match shape {:?}",
                self.data.len(),
                self.shape
            ))
        })
    }
}

/// Squared Euclidean norm over a list of gradient matrices.
pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|a| a * a).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

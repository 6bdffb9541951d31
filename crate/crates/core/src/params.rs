use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::Matrix;

/// How weight matrices are drawn at initialization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Every weight entry from N(0, 1).
    UnitGaussian,
    /// N(0, 1/√fan_in); stable at desk scale.
    #[default]
    Scaled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: (rows, cols),
            init: Init::Normal { fan_in: rows },
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: (rows, cols),
            init: Init::Zeros,
        }
    }

    pub fn ones(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: (rows, cols),
            init: Init::Ones,
        }
    }
}

/// Every trainable tensor, keyed by `module.role` names.
///
/// Iteration order is the lexicographic order of names, which keeps
/// serialization and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every spec in order from `rng`.
    pub fn initialize<R: Rng + ?Sized>(specs: &[ParamSpec], mode: InitMode, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        for spec in specs {
            let value = match spec.init {
                Init::Zeros => Matrix::zeros(spec.shape),
                Init::Ones => Matrix::ones(spec.shape),
                Init::Normal { fan_in } => {
                    let sd = match mode {
                        InitMode::UnitGaussian => 1.0,
                        InitMode::Scaled => 1.0 / (fan_in.max(1) as f64).sqrt(),
                    };
                    let normal = Normal::new(0.0, sd).expect("finite standard deviation");
                    Matrix::from_shape_simple_fn(spec.shape, || normal.sample(rng))
                }
            };
            store.insert(&spec.name, value);
        }
        store
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, m) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                m.fill(0.0);
            }
        }
    }

    /// Frobenius norm per tensor, used in training diagnostics.
    pub fn norms(&self) -> BTreeMap<String, f64> {
        self.tensors
            .iter()
            .map(|(k, m)| (k.clone(), m.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Checks that this store has exactly the names and shapes of `specs`.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<(), String> {
        if self.tensors.len() != specs.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.tensors.len()
            ));
        }
        for spec in specs {
            match self.tensors.get(&spec.name) {
                None => return Err(format!("missing tensor {}", spec.name)),
                Some(m) if m.dim() != spec.shape => {
                    return Err(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        spec.name,
                        m.dim(),
                        spec.shape
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

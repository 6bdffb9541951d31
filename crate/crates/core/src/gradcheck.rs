//! Finite-difference gradient checking.
//!
//! The function under test reads every input from a [`ParamStore`] and
//! returns an output of any shape. The output is reduced to a scalar with
//! fixed pseudo-random weights so every output entry influences the check.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Matrix, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Entries sampled per tensor; `None` checks all of them.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            max_entries_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<EntryError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn reduction_weights(shape: (usize, usize), seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_eed0_f9ad);
    Matrix::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<Matrix>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut t = Tape::new();
    let out = f(&mut t, store)?;
    Ok(t.value(out).clone())
}

/// Compares reverse-mode gradients against central differences for every
/// unfrozen tensor the function binds.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut t = Tape::new();
    let out = f(&mut t, store)?;
    let base = t.value(out).clone();
    if evaluate(&f, store)? != base {
        return Err(Error::Harness(
            "function under test is not deterministic; fix its randomness before checking gradients".into(),
        ));
    }
    let weights = reduction_weights(base.dim(), opts.seed);
    let w = t.constant(weights.clone());
    let weighted = t.mul(out, w);
    let scalar = t.sum(weighted);
    let grads = t.backward(scalar);
    let bound: Vec<(String, Var)> = t
        .bound_params()
        .iter()
        .filter(|(name, _)| !store.is_frozen(name))
        .map(|(n, v)| (n.clone(), *v))
        .collect();

    let reduce = |m: &Matrix| (m * &weights).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut perturbed = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
        tolerance: opts.tolerance,
    };
    for (name, var) in bound {
        let shape = t.shape(var);
        let analytic = grads.get_or_zeros(var, shape);
        let total = shape.0 * shape.1;
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < total => {
                let mut v = sample(&mut rng, total, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..total).collect(),
        };
        for flat in entries {
            let (r, c) = (flat / shape.1, flat % shape.1);
            let orig = store.get(&name).expect("bound tensor")[[r, c]];
            perturbed.get_mut(&name).expect("bound tensor")[[r, c]] = orig + opts.step;
            let plus = reduce(&evaluate(&f, &perturbed)?);
            perturbed.get_mut(&name).expect("bound tensor")[[r, c]] = orig - opts.step;
            let minus = reduce(&evaluate(&f, &perturbed)?);
            perturbed.get_mut(&name).expect("bound tensor")[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[[r, c]];
            let mut rel = relative_error(a, numeric, opts.floor);
            if !rel.is_finite() {
                rel = f64::INFINITY;
            }
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some(EntryError {
                    tensor: name.clone(),
                    row: r,
                    col: c,
                    analytic: a,
                    numeric,
                    relative: rel,
                });
            }
        }
    }
    Ok(report)
}

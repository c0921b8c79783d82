//! Central finite-difference verification of tape gradients.

use crate::error::TensorError;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` for every parameter whose name starts with
/// one of `prefixes` (all parameters when empty).
pub fn finite_diff_check<E, F>(
    store: &ParamStore,
    prefixes: &[&str],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let eval = |s: &ParamStore| -> Result<f64, E> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut rng = SeededRng::new(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let names: Vec<String> = store
        .names()
        .filter(|n| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect();
    for name in names {
        let len = store.require(&name)?.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if let Some(k) = opts.max_coords_per_param {
            rng.shuffle(&mut coords);
            coords.truncate(k);
        }
        for idx in coords {
            let original = store.require(&name)?.data()[idx];
            work.get_mut(&name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?.data_mut()[idx] =
                original + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(&name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?.data_mut()[idx] =
                original - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(&name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?.data_mut()[idx] =
                original;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), idx, analytic, numeric));
            }
        }
    }
    Ok(report)
}

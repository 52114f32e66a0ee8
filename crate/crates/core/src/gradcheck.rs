//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, TrainFilter, Var};
use crate::params::ParamStore;

/// Relative error below which magnitudes are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Relative disagreement `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares analytic gradients of `loss_fn` against central differences
/// for up to `samples` random entries of the named parameters and returns
/// the largest relative error. `loss_fn` must build a scalar loss from the
/// store it is given.
pub fn finite_difference_check<F, R>(
    store: &ParamStore,
    names: &[&str],
    loss_fn: F,
    step: f64,
    samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    if names.is_empty() {
        return Err(Error::InvalidArgument("no parameters to check".into()));
    }
    let mut work = store.clone();
    for n in names {
        if !work.get(n)?.all_finite() {
            return Err(Error::InvalidArgument(format!("parameter {n} is not finite")));
        }
    }
    work.set_frozen_prefix("", false);
    let filter = TrainFilter::prefixes(names);
    let mut g = Graph::new(filter);
    let loss = loss_fn(&mut g, &work)?;
    let grads = g.backward(loss)?;

    let mut entries = Vec::new();
    for n in names {
        for i in 0..work.get(n)?.len() {
            entries.push((*n, i));
        }
    }
    let picked = index::sample(rng, entries.len(), samples.min(entries.len()));

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss_fn(&mut g, s)?;
        Ok(g.value(l).data()[0])
    };
    let mut worst = 0.0f64;
    for k in picked {
        let (name, i) = entries[k];
        let analytic = grads.param(name, &g).map_or(0.0, |t| t.data()[i]);
        let orig = work.get(name)?.data()[i];
        work.tensor_mut(name)?.data_mut()[i] = orig + step;
        let up = eval(&work)?;
        work.tensor_mut(name)?.data_mut()[i] = orig - step;
        let down = eval(&work)?;
        work.tensor_mut(name)?.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

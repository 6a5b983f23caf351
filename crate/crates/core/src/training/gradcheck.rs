use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fit::Objective;
use super::loss::Target;
use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::model::{Bound, Latent, ParamStore};
use crate::tape::{AdjointFault, Graph};
use crate::tensor::Mat;

/// Gradients below this magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn fraction_below(&self, tol: f64) -> f64 {
        if self.rel_errors.is_empty() {
            return 1.0;
        }
        self.rel_errors.iter().filter(|&&e| e < tol).count() as f64 / self.rel_errors.len() as f64
    }

    /// Distinct tensor names touched by the sampled coordinates.
    pub fn tensors<'a>(&self, store: &'a ParamStore) -> Vec<&'a str> {
        let mut names: Vec<&str> = self.coordinates.iter().filter_map(|&c| store.locate(c).map(|(n, _)| n)).collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

/// Draws `n` flat coordinates, cycling through tensors so every tensor is
/// represented before any repeats.
pub fn sample_coordinates(store: &ParamStore, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, m) in store.iter() {
        starts.push((offset, m.len()));
        offset += m.len();
    }
    let nonempty: Vec<_> = starts.into_iter().filter(|&(_, len)| len > 0).collect();
    if nonempty.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let (start, len) = nonempty[i % nonempty.len()];
            start + rng.random_range(0..len)
        })
        .collect()
}

fn loss_value(objective: &dyn Objective, store: &ParamStore, rec: &Record, target: &Target, noise: &Mat) -> Result<f64> {
    let mut g = Graph::new();
    let bound = Bound::frozen(&mut g, store);
    let lv = objective.record_loss(&mut g, &bound, rec, target, Latent::Sample(noise))?;
    Ok(g.scalar(lv.total))
}

/// Compares reverse-mode gradients with central differences of step `step`
/// at the given flat coordinates, holding the latent noise fixed. `fault`
/// corrupts the analytic pass for mutation testing.
pub fn grad_check(
    objective: &dyn Objective,
    store: &ParamStore,
    rec: &Record,
    noise: &Mat,
    coordinates: &[usize],
    step: f64,
    fault: Option<AdjointFault>,
) -> Result<GradCheckReport> {
    let target = Target::full_horizon(rec)?;
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let bound = Bound::trainable(&mut g, store);
    let lv = objective.record_loss(&mut g, &bound, rec, &target, Latent::Sample(noise))?;
    let grads = g.backward(lv.total);

    let mut report = GradCheckReport {
        coordinates: coordinates.to_vec(),
        analytic: Vec::with_capacity(coordinates.len()),
        numeric: Vec::with_capacity(coordinates.len()),
        rel_errors: Vec::with_capacity(coordinates.len()),
        max_rel_error: 0.0,
    };
    for &c in coordinates {
        let (name, offset) = store
            .locate(c)
            .ok_or_else(|| Error::InvalidArgument(format!("coordinate {c} outside parameter space")))?;
        let analytic = grads.get(bound.get(name)?).as_slice()[offset];
        let mut probe = store.clone();
        let base = probe.get(name)?.as_slice()[offset];
        probe.get_mut(name)?.as_mut_slice()[offset] = base + step;
        let up = loss_value(objective, &probe, rec, &target, noise)?;
        probe.get_mut(name)?.as_mut_slice()[offset] = base - step;
        let down = loss_value(objective, &probe, rec, &target, noise)?;
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
        report.rel_errors.push(rel);
    }
    Ok(report)
}

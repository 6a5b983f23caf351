use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Centroids closer than this are reported as coincident.
const COINCIDENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Unit-norm centroids, one per row.
    pub centroids: Mat,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after seeding, then after every Lloyd update.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    /// Two or more centroids coincide, typically from duplicated features.
    pub coincident: bool,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum over rows of the squared distance to the assigned centroid.
pub fn kmeans_objective(features: &Mat, centroids: &Mat, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(features.row(i), centroids.row(a)))
        .sum()
}

fn nearest(x: &[f64], centroids: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(features: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = features.rows();
    let mut centroids = Mat::zeros(k, features.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(features.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(features.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn assign(features: &Mat, centroids: &Mat) -> Vec<usize> {
    (0..features.rows()).map(|i| nearest(features.row(i), centroids).0).collect()
}

/// Moves the farthest point of a multi-member cluster into each empty
/// cluster.
fn reseed_empty(features: &Mat, centroids: &mut Mat, assignments: &mut [usize]) {
    let k = centroids.rows();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..features.rows())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&i, &j| {
                let di = sq_dist(features.row(i), centroids.row(assignments[i]));
                let dj = sq_dist(features.row(j), centroids.row(assignments[j]));
                di.total_cmp(&dj)
            });
        let Some(far) = far else {
            return;
        };
        centroids.row_mut(empty).copy_from_slice(features.row(far));
        assignments[far] = empty;
    }
}

/// Normalized member means. A cluster whose members cancel keeps its
/// previous centroid.
fn update(features: &Mat, centroids: &mut Mat, assignments: &[usize]) {
    let mut sums = Mat::zeros(centroids.rows(), features.cols());
    for (i, &a) in assignments.iter().enumerate() {
        for (s, x) in sums.row_mut(a).iter_mut().zip(features.row(i)) {
            *s += x;
        }
    }
    for c in 0..centroids.rows() {
        let n = sums.row(c).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / n;
            }
        }
    }
}

fn lloyd(features: &Mat, mut centroids: Mat, max_iter: usize) -> KMeansFit {
    let mut assignments = assign(features, &centroids);
    reseed_empty(features, &mut centroids, &mut assignments);
    let mut trace = vec![kmeans_objective(features, &centroids, &assignments)];
    let mut iterations = 0;
    while iterations < max_iter {
        update(features, &mut centroids, &assignments);
        trace.push(kmeans_objective(features, &centroids, &assignments));
        iterations += 1;
        let mut next = assign(features, &centroids);
        reseed_empty(features, &mut centroids, &mut next);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let coincident = (0..centroids.rows())
        .any(|a| (a + 1..centroids.rows()).any(|b| sq_dist(centroids.row(a), centroids.row(b)) < COINCIDENT_TOL));
    KMeansFit {
        centroids,
        assignments,
        objective_trace: trace,
        iterations,
        coincident,
    }
}

/// Spherical k-means with k-means++ seeding, keeping the restart with the
/// lowest final objective. Rows of `features` must be unit vectors.
pub fn fit_kmeans(features: &Mat, k: usize, seed: u64, max_iter: usize, restarts: usize) -> Result<KMeansFit> {
    if k == 0 || k > features.rows() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {} features",
            features.rows()
        )));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite {
            context: "clustering features".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let init = seed_plus_plus(features, k, &mut rng);
        let fit = lloyd(features, init, max_iter);
        if best.as_ref().is_none_or(|b| fit.objective() < b.objective()) {
            best = Some(fit);
        }
    }
    let best = best.expect("at least one restart");
    if best.coincident {
        log::warn!("k-means produced coincident centroids; features may be duplicated");
    }
    Ok(best)
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{NormalizationSpec, PrefixSplit, Record, SplitTag};
use crate::sim::{Family, ScenarioMeta};

/// Smooth multi-channel record on a uniform grid with a 30% prefix.
pub fn synthetic_record(n_channels: usize, n_samples: usize, seed: u64) -> Record {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (0..n_samples).map(|i| i as f64 / (n_samples - 1) as f64).collect();
    let gap = times[1];
    let values = (0..n_channels)
        .map(|_| {
            let (a, w, ph): (f64, f64, f64) = (rng.random_range(0.3..0.9), rng.random_range(1.0..6.0), rng.random_range(0.0..6.0));
            times.iter().map(|&t| a * (w * t + ph).sin()).collect()
        })
        .collect();
    let n_observed = (0.3 * n_samples as f64) as usize;
    Record {
        channels: (0..n_channels).map(|j| format!("c{j}")).collect(),
        dt: (0..n_samples).map(|i| if i == 0 { gap } else { times[i] - times[i - 1] }).collect(),
        times,
        values,
        norm: NormalizationSpec {
            scale: vec![1.0; n_channels],
            offset: vec![0.0; n_channels],
            t_max: 1.0,
        },
        split: PrefixSplit {
            prefix_ratio: 0.3,
            t_obs: 0.3,
            n_observed,
        },
        meta: ScenarioMeta::new(Family::Swing, 0.1, seed),
        tag: SplitTag::Pretrain,
    }
}

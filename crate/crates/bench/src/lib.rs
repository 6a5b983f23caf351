//! Criterion benchmarks live under `benches/`; shared fixtures are here.

use lasslab_core::dataset::{normalize_record, Record};
use lasslab_core::sim::{make_scenario_batch, Family, Sweep};

/// `n` swing records at prefix ratio 0.4, cycling over the sweep.
pub fn swing_records(n: usize) -> Vec<Record> {
    let sweep = Sweep::default_for(Family::Swing);
    let seeds: Vec<u64> = (0..n.div_ceil(sweep.magnitudes.len()) as u64).collect();
    let batch = make_scenario_batch(Family::Swing, &sweep, &seeds).expect("default swing sweep simulates");
    batch
        .trajectories
        .iter()
        .take(n)
        .map(|t| normalize_record(t, 0.4).expect("swing trajectories normalize"))
        .collect()
}

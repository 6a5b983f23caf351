//! Tagged multi-family corpora: each group simulates one family under one
//! parameter regime and tags every record it produces.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_record, Record, SplitTag};
use crate::error::{Error, Result};
use crate::sim::{make_scenario_batch, Family, Jitter, Sweep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub family: Family,
    pub tag: SplitTag,
    /// Each seed yields one record per sweep magnitude.
    pub n_seeds: usize,
    /// Replaces the family's default sweep.
    #[serde(default)]
    pub sweep: Option<Sweep>,
    /// Replaces the sweep's jitter; this is how a group selects a regime.
    #[serde(default)]
    pub jitter: Option<Vec<Jitter>>,
    /// Keeps the first `limit` records only.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub prefix_ratio: f64,
    pub groups: Vec<GroupSpec>,
}

fn jitter(param: &str, low: f64, high: f64) -> Jitter {
    Jitter {
        param: param.into(),
        low,
        high,
    }
}

impl CorpusSpec {
    /// Three families pretrained near nominal parameters. Each family then has
    /// a shifted regime split into fine-tune and test records, and a second
    /// shifted regime that is only ever evaluated.
    pub fn standard(scenarios_per_group: usize) -> Self {
        let shifted = |family: Family| match family {
            Family::Swing => vec![jitter("damping", 3.0, 4.0), jitter("inertia", 0.5, 0.6)],
            Family::Erl => vec![jitter("tp", 2.5, 3.0), jitter("tq", 2.5, 3.0)],
            Family::Emt => vec![jitter("resistance", 2.5, 3.0), jitter("capacitance", 0.5, 0.6)],
        };
        let unseen = |family: Family| match family {
            Family::Swing => vec![jitter("reactance", 1.4, 1.5), jitter("load", 0.6, 0.7)],
            Family::Erl => vec![jitter("alpha_t", 1.5, 1.6), jitter("beta_t", 1.5, 1.6)],
            Family::Emt => vec![jitter("inductance", 1.8, 2.0), jitter("load", 0.6, 0.7)],
        };
        let nominal = |family: Family| {
            crate::sim::jitter_names(family).iter().map(|n| jitter(n, 0.9, 1.1)).collect::<Vec<_>>()
        };
        let mut groups = Vec::new();
        for family in [Family::Swing, Family::Erl, Family::Emt] {
            let n_mag = Sweep::default_for(family).magnitudes.len();
            let n_seeds = scenarios_per_group.div_ceil(n_mag);
            let group = |tag, jitter| GroupSpec {
                family,
                tag,
                n_seeds,
                sweep: None,
                jitter,
                limit: Some(scenarios_per_group),
            };
            groups.push(group(SplitTag::Pretrain, Some(nominal(family))));
            groups.push(group(SplitTag::Finetune, Some(shifted(family))));
            groups.push(group(SplitTag::Test, Some(shifted(family))));
            groups.push(group(SplitTag::ZeroShot, Some(unseen(family))));
        }
        CorpusSpec {
            prefix_ratio: 0.4,
            groups,
        }
    }
}

/// Simulates every group, giving each a disjoint block of seeds after
/// `base_seed` so record ids never collide. Failed scenarios abort.
pub fn build_corpus(spec: &CorpusSpec, base_seed: u64) -> Result<Vec<Record>> {
    let mut next_seed = base_seed;
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (gi, g) in spec.groups.iter().enumerate() {
        if g.n_seeds == 0 {
            return Err(Error::InvalidArgument(format!("group {gi}: n_seeds must be positive")));
        }
        let mut sweep = g.sweep.clone().unwrap_or_else(|| Sweep::default_for(g.family));
        if let Some(j) = &g.jitter {
            sweep.jitter = j.clone();
        }
        let seeds: Vec<u64> = (next_seed..next_seed + g.n_seeds as u64).collect();
        next_seed += g.n_seeds as u64;
        let mut batch = make_scenario_batch(g.family, &sweep, &seeds)?;
        if let Some(e) = batch.failures.drain(..).next() {
            return Err(e);
        }
        for traj in batch.trajectories.iter().take(g.limit.unwrap_or(usize::MAX)) {
            let mut rec = normalize_record(traj, spec.prefix_ratio)?;
            rec.tag = g.tag;
            if !ids.insert(rec.id().to_owned()) {
                return Err(Error::InvalidArgument(format!("duplicate record id {}", rec.id())));
            }
            records.push(rec);
        }
    }
    Ok(records)
}

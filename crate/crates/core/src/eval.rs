//! Prediction scoring: per-record MSE in normalized and physical units,
//! aggregated by split tag and prefix ratio.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Record, SplitTag};
use crate::error::{Error, Result};

/// Prediction times must sit this close to a record sample.
pub const TIME_TOL: f64 = 1e-9;

/// Normalized predictions of one record, `values[channel][sample]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Which record samples are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Horizon {
    /// Every sample, observed prefix included.
    Full,
    /// Only samples after the observed prefix.
    #[default]
    Future,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub id: String,
    pub tag: SplitTag,
    pub prefix_ratio: f64,
    pub n_values: usize,
    pub mse: f64,
    pub mse_physical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub tag: SplitTag,
    pub prefix_ratio: f64,
    pub n_records: usize,
    /// Mean of the member records' MSE.
    pub mse: f64,
    pub mse_physical: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<RecordMetrics>,
    pub groups: Vec<GroupMetrics>,
}

/// Table-style scaling of reported MSE values.
pub const REPORT_SCALE: f64 = 1e2;

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn score(rec: &Record, pred: &Prediction, horizon: Horizon) -> Result<RecordMetrics> {
    if pred.values.len() != rec.n_channels() {
        return Err(Error::shape(
            "eval",
            format!("{}: {} predicted channels, record has {}", rec.id(), pred.values.len(), rec.n_channels()),
        ));
    }
    let start = match horizon {
        Horizon::Full => 0,
        Horizon::Future => rec.split.n_observed,
    };
    let mut idx = Vec::with_capacity(pred.times.len());
    for (k, &t) in pred.times.iter().enumerate() {
        let i = rec.times.partition_point(|&x| x < t - TIME_TOL);
        if i >= rec.n_samples() || (rec.times[i] - t).abs() > TIME_TOL {
            return Err(Error::InvalidArgument(format!(
                "{}: prediction time {t} matches no sample within {TIME_TOL:e}",
                rec.id()
            )));
        }
        if i >= start {
            idx.push((k, i));
        }
    }
    let (mut sum, mut sum_phys) = (0.0, 0.0);
    for (j, ch) in pred.values.iter().enumerate() {
        if ch.len() != pred.times.len() {
            return Err(Error::shape("eval", format!("{}: channel {j} length", rec.id())));
        }
        let s = rec.norm.scale[j];
        for &(k, i) in &idx {
            let e = ch[k] - rec.values[j][i];
            sum += e * e;
            sum_phys += (e * s) * (e * s);
        }
    }
    let n = idx.len() * rec.n_channels();
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{}: no scored samples", rec.id())));
    }
    Ok(RecordMetrics {
        id: rec.id().to_owned(),
        tag: rec.tag,
        prefix_ratio: rec.split.prefix_ratio,
        n_values: n,
        mse: sum / n as f64,
        mse_physical: sum_phys / n as f64,
    })
}

/// Scores predictions against records matched by id.
pub fn eval_metrics(predictions: &[Prediction], records: &[Record], horizon: Horizon) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &Record> = records.iter().map(|r| (r.id(), r)).collect();
    let mut report = EvalReport::default();
    for p in predictions {
        let rec = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no record with id {}", p.id)))?;
        report.records.push(score(rec, p, horizon)?);
    }
    let mut groups: BTreeMap<(SplitTag, u64), Vec<&RecordMetrics>> = BTreeMap::new();
    for r in &report.records {
        groups.entry((r.tag, r.prefix_ratio.to_bits())).or_default().push(r);
    }
    report.groups = groups
        .into_iter()
        .map(|((tag, ratio), members)| GroupMetrics {
            tag,
            prefix_ratio: f64::from_bits(ratio),
            n_records: members.len(),
            mse: mean(members.iter().map(|m| m.mse)),
            mse_physical: mean(members.iter().map(|m| m.mse_physical)),
        })
        .collect();
    Ok(report)
}

impl EvalReport {
    pub fn group(&self, tag: SplitTag) -> Vec<&GroupMetrics> {
        self.groups.iter().filter(|g| g.tag == tag).collect()
    }

    /// Mean record MSE over every record carrying `tag`.
    pub fn mean_mse(&self, tag: SplitTag) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter(|r| r.tag == tag).map(|r| r.mse).collect();
        (!v.is_empty()).then(|| mean(v.into_iter()))
    }

    /// Record rows followed by group rows; MSE columns are scaled by
    /// [`REPORT_SCALE`] in normalized units and left raw in physical units.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,id,tag,prefix_ratio,n,mse_x1e-2,mse_physical\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "record,{},{},{},{},{},{}",
                r.id,
                r.tag.as_str(),
                r.prefix_ratio,
                r.n_values,
                r.mse * REPORT_SCALE,
                r.mse_physical
            );
        }
        for g in &self.groups {
            let _ = writeln!(
                s,
                "group,,{},{},{},{},{}",
                g.tag.as_str(),
                g.prefix_ratio,
                g.n_records,
                g.mse * REPORT_SCALE,
                g.mse_physical
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::testutil::synthetic_record;

    fn exact(rec: &Record) -> Prediction {
        Prediction {
            id: rec.id().to_owned(),
            times: rec.times.clone(),
            values: rec.values.clone(),
        }
    }

    #[test]
    fn identical_is_zero() {
        let rec = synthetic_record(3, 40, 1);
        let r = eval_metrics(&[exact(&rec)], std::slice::from_ref(&rec), Horizon::Full).unwrap();
        assert_eq!(r.records[0].mse, 0.0);
        assert_eq!(r.groups[0].mse, 0.0);
    }

    #[test]
    fn constant_offset_gives_its_square() {
        let mut rec = synthetic_record(2, 40, 2);
        rec.norm.scale = vec![2.0, 0.5];
        let mut p = exact(&rec);
        for ch in &mut p.values {
            ch.iter_mut().for_each(|v| *v += 0.3);
        }
        let r = eval_metrics(&[p], std::slice::from_ref(&rec), Horizon::Future).unwrap();
        assert!((r.records[0].mse - 0.09).abs() < 1e-14);
        assert!((r.records[0].mse_physical - 0.09 * (4.0 + 0.25) / 2.0).abs() < 1e-14);
        assert_eq!(r.records[0].n_values, 2 * (40 - rec.split.n_observed));
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rec = synthetic_record(4, 60, 3);
        let mut p = exact(&rec);
        for ch in &mut p.values {
            ch.iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0));
        }
        let r = eval_metrics(&[p.clone()], std::slice::from_ref(&rec), Horizon::Full).unwrap();
        let sq: Vec<f64> = p
            .values
            .iter()
            .zip(&rec.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
            .collect();
        let per_channel: Vec<f64> = sq.chunks(60).map(|c| c.iter().sum::<f64>()).collect();
        let oracle = per_channel.iter().sum::<f64>() / sq.len() as f64;
        assert!((r.records[0].mse - oracle).abs() < 1e-12);
    }

    #[test]
    fn groups_average_records() {
        let mut a = synthetic_record(2, 40, 1);
        let mut b = synthetic_record(2, 40, 2);
        let mut c = synthetic_record(2, 40, 3);
        a.tag = SplitTag::Finetune;
        b.tag = SplitTag::Finetune;
        c.tag = SplitTag::ZeroShot;
        let recs = [a, b, c];
        let preds: Vec<_> = recs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut p = exact(r);
                p.values.iter_mut().flatten().for_each(|v| *v += 0.1 * (i + 1) as f64);
                p
            })
            .collect();
        let r = eval_metrics(&preds, &recs, Horizon::Future).unwrap();
        let ft = r.group(SplitTag::Finetune);
        assert_eq!(ft.len(), 1);
        assert_eq!(ft[0].n_records, 2);
        assert!((ft[0].mse - (0.01 + 0.04) / 2.0).abs() < 1e-14);
        assert!((r.mean_mse(SplitTag::ZeroShot).unwrap() - 0.09).abs() < 1e-14);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 2);
        assert!(csv.contains("group,,zero-shot,"));
    }

    #[test]
    fn misaligned_times_are_rejected() {
        let rec = synthetic_record(2, 40, 1);
        let mut p = exact(&rec);
        p.times[5] += 1e-6;
        assert!(eval_metrics(&[p], std::slice::from_ref(&rec), Horizon::Full).is_err());
        let mut p = exact(&rec);
        p.times[5] += 1e-10;
        assert!(eval_metrics(&[p], std::slice::from_ref(&rec), Horizon::Full).is_ok());
        let mut p = exact(&rec);
        p.id = "missing".into();
        assert!(eval_metrics(&[p], std::slice::from_ref(&rec), Horizon::Full).is_err());
    }
}

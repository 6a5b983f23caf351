//! Model-ready records: prefix-based normalization, prefix splits and the
//! on-disk dataset layout (`manifest.json`, `records/<id>.csv`,
//! `records/<id>.meta.json`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim::{ScenarioMeta, Trajectory};

pub const FORMAT_VERSION: &str = "lasslab-dataset/1";
pub const MIN_PREFIX: usize = 4;
/// Out-of-range allowance on normalized prefix values.
pub const RANGE_GUARD: f64 = 0.05;

/// Per-channel affine `x = scale * x_norm + offset` plus the time scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSplit {
    pub prefix_ratio: f64,
    /// Last observed normalized time.
    pub t_obs: f64,
    pub n_observed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    #[default]
    Pretrain,
    Finetune,
    Test,
    ZeroShot,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Pretrain => "pretrain",
            SplitTag::Finetune => "finetune",
            SplitTag::Test => "test",
            SplitTag::ZeroShot => "zero-shot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub channels: Vec<String>,
    /// Normalized sample times on [0, 1].
    pub times: Vec<f64>,
    /// Time increments; the first entry repeats the first gap so all are
    /// positive.
    pub dt: Vec<f64>,
    /// `values[channel][sample]`, normalized.
    pub values: Vec<Vec<f64>>,
    pub norm: NormalizationSpec,
    pub split: PrefixSplit,
    pub meta: ScenarioMeta,
    pub tag: SplitTag,
}

impl Record {
    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.times.len()
    }

    pub fn observed_times(&self) -> &[f64] {
        &self.times[..self.split.n_observed]
    }

    pub fn observed(&self, channel: usize) -> &[f64] {
        &self.values[channel][..self.split.n_observed]
    }

    pub fn observed_dt(&self) -> &[f64] {
        &self.dt[..self.split.n_observed]
    }

    /// Copy restricted to the channels at `idx`, in that order.
    pub fn select_channels(&self, idx: &[usize]) -> Record {
        let mut r = self.clone();
        r.channels = idx.iter().map(|&i| self.channels[i].clone()).collect();
        r.values = idx.iter().map(|&i| self.values[i].clone()).collect();
        r.norm.scale = idx.iter().map(|&i| self.norm.scale[i]).collect();
        r.norm.offset = idx.iter().map(|&i| self.norm.offset[i]).collect();
        r
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.values.len() != self.channels.len()
            || self.norm.scale.len() != self.channels.len()
            || self.norm.offset.len() != self.channels.len()
            || self.dt.len() != n
        {
            return Err(Error::shape("Record", "channel or sample counts disagree"));
        }
        if self.values.iter().any(|v| v.len() != n) {
            return Err(Error::shape("Record", "channel length differs from times"));
        }
        if self.times.iter().any(|t| !(0.0..=1.0).contains(t)) || self.dt.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidArgument(format!("record {} has bad times", self.id())));
        }
        if self.norm.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("normalization scale must be positive".into()));
        }
        if self.split.n_observed < MIN_PREFIX || self.split.n_observed >= n.max(1) {
            return Err(Error::InsufficientPrefix {
                observed: self.split.n_observed,
                required: MIN_PREFIX,
            });
        }
        Ok(())
    }
}

fn increments(times: &[f64]) -> Vec<f64> {
    let mut dt = Vec::with_capacity(times.len());
    for i in 0..times.len() {
        dt.push(if i == 0 {
            times.get(1).map_or(1.0, |t1| t1 - times[0])
        } else {
            times[i] - times[i - 1]
        });
    }
    dt
}

fn observed_count(ratio: f64, n: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("prefix ratio {ratio} outside (0, 1)")));
    }
    let k = ((ratio * n as f64) + 1e-9).floor() as usize;
    let k = k.min(n.saturating_sub(1));
    if k < MIN_PREFIX {
        return Err(Error::InsufficientPrefix {
            observed: k,
            required: MIN_PREFIX,
        });
    }
    Ok(k)
}

/// Maps each channel's prefix min/max onto [-1, 1] and time onto [0, 1].
/// Constant prefixes get unit scale and an offset equal to the constant.
pub fn normalize_record(traj: &Trajectory, prefix_ratio: f64) -> Result<Record> {
    traj.validate()?;
    let n = traj.n_samples();
    let n_obs = observed_count(prefix_ratio, n)?;
    let mut scale = Vec::with_capacity(traj.channels.len());
    let mut offset = Vec::with_capacity(traj.channels.len());
    let mut values = Vec::with_capacity(traj.channels.len());
    for ch in &traj.values {
        let prefix = &ch[..n_obs];
        let lo = prefix.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = prefix.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (s, o) = if hi > lo {
            ((hi - lo) / 2.0, (hi + lo) / 2.0)
        } else {
            (1.0, lo)
        };
        scale.push(s);
        offset.push(o);
        values.push(ch.iter().map(|x| (x - o) / s).collect());
    }
    let times: Vec<f64> = traj.times.iter().map(|t| t / traj.t_max).collect();
    let rec = Record {
        channels: traj.channels.clone(),
        dt: increments(&times),
        times,
        values,
        norm: NormalizationSpec {
            scale,
            offset,
            t_max: traj.t_max,
        },
        split: PrefixSplit {
            prefix_ratio,
            t_obs: prefix_ratio,
            n_observed: n_obs,
        },
        meta: traj.meta.clone(),
        tag: SplitTag::default(),
    };
    rec.validate()?;
    Ok(rec)
}

/// Inverse affine per channel.
pub fn denormalize(rec: &Record, normalized: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if normalized.len() != rec.n_channels() {
        return Err(Error::shape(
            "denormalize",
            format!("{} channels given, record has {}", normalized.len(), rec.n_channels()),
        ));
    }
    Ok(normalized
        .iter()
        .enumerate()
        .map(|(j, ch)| {
            let (s, o) = (rec.norm.scale[j], rec.norm.offset[j]);
            ch.iter().map(|x| x * s + o).collect()
        })
        .collect())
}

pub fn denormalize_times(rec: &Record, times: &[f64]) -> Vec<f64> {
    times.iter().map(|t| t * rec.norm.t_max).collect()
}

/// Recomputes the observed/target partition; values and normalization are
/// left untouched.
pub fn split_prefix(rec: &Record, ratio: f64) -> Result<Record> {
    let n_obs = observed_count(ratio, rec.n_samples())?;
    let mut out = rec.clone();
    out.split = PrefixSplit {
        prefix_ratio: ratio,
        t_obs: ratio,
        n_observed: n_obs,
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: SplitTag,
    pub csv: String,
    pub meta: String,
    pub csv_sha256: String,
    pub meta_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: String,
    pub dataset_id: String,
    pub record_count: usize,
    /// Sorted union of channel names.
    pub channels: Vec<String>,
    pub records: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids_with(&self, tag: SplitTag) -> Vec<&str> {
        self.records.iter().filter(|e| e.split == tag).map(|e| e.id.as_str()).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    norm: NormalizationSpec,
    split: PrefixSplit,
    meta: ScenarioMeta,
    tag: SplitTag,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn record_csv(rec: &Record) -> String {
    let mut s = String::from("time");
    for c in &rec.channels {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for i in 0..rec.n_samples() {
        write!(s, "{}", rec.times[i]).unwrap();
        for ch in &rec.values {
            write!(s, ",{}", ch[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

fn parse_csv(path: &Path, text: &str) -> Result<(Vec<String>, Vec<f64>, Vec<Vec<f64>>)> {
    let bad = |line: usize, detail: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("time") {
        return Err(bad(1, "first column must be `time`".into()));
    }
    let channels: Vec<String> = cols.map(str::to_owned).collect();
    let mut times = Vec::new();
    let mut values = vec![Vec::new(); channels.len()];
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != channels.len() + 1 {
            return Err(bad(
                lineno,
                format!("expected {} fields, found {}", channels.len() + 1, fields.len()),
            ));
        }
        let parse = |f: &str| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(lineno, format!("not a finite number: {f:?}")))
        };
        times.push(parse(fields[0])?);
        for (j, f) in fields[1..].iter().enumerate() {
            values[j].push(parse(f)?);
        }
    }
    Ok((channels, times, values))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the dataset under `dir`; the dataset id is the directory name.
pub fn write_dataset(records: &[Record], dir: &Path) -> Result<DatasetManifest> {
    let rec_dir = dir.join("records");
    fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    let mut channels = std::collections::BTreeSet::new();
    let mut seen = std::collections::HashSet::new();
    for rec in records {
        rec.validate()?;
        let id = rec.id();
        if !seen.insert(id.to_owned()) {
            return Err(Error::InvalidArgument(format!("duplicate record id {id}")));
        }
        if id.contains(['/', '\\']) || rec.channels.iter().any(|c| c.contains([',', '\n'])) {
            return Err(Error::InvalidArgument(format!("record {id} has unwritable names")));
        }
        channels.extend(rec.channels.iter().cloned());
        let csv = record_csv(rec);
        let sidecar = Sidecar {
            norm: rec.norm.clone(),
            split: rec.split.clone(),
            meta: rec.meta.clone(),
            tag: rec.tag,
        };
        let meta = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&rec_dir, e))? + "\n";
        let csv_name = format!("records/{id}.csv");
        let meta_name = format!("records/{id}.meta.json");
        write_file(&dir.join(&csv_name), csv.as_bytes())?;
        write_file(&dir.join(&meta_name), meta.as_bytes())?;
        entries.push(ManifestEntry {
            id: id.to_owned(),
            split: rec.tag,
            csv: csv_name,
            meta: meta_name,
            csv_sha256: sha256_hex(csv.as_bytes()),
            meta_sha256: sha256_hex(meta.as_bytes()),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.into(),
        dataset_id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        record_count: entries.len(),
        channels: channels.into_iter().collect(),
        records: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))? + "\n";
    write_file(&path, text.as_bytes())?;
    Ok(manifest)
}

fn read_checked(dir: &Path, rel: &str, sha: &str) -> Result<String> {
    let path: PathBuf = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != sha {
        return Err(Error::Checksum { path });
    }
    String::from_utf8(bytes).map_err(|e| Error::Csv {
        path,
        line: 0,
        detail: format!("not UTF-8: {e}"),
    })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION.into(),
        });
    }
    if manifest.record_count != manifest.records.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: record_count {} but {} entries",
            path.display(),
            manifest.record_count,
            manifest.records.len()
        )));
    }
    Ok(manifest)
}

/// Exact inverse of [`write_dataset`], in manifest order.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Record>)> {
    let manifest = read_manifest(dir)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let csv = read_checked(dir, &entry.csv, &entry.csv_sha256)?;
        let meta_text = read_checked(dir, &entry.meta, &entry.meta_sha256)?;
        let meta_path = dir.join(&entry.meta);
        let sidecar: Sidecar = serde_json::from_str(&meta_text).map_err(|e| Error::json(&meta_path, e))?;
        let (channels, times, values) = parse_csv(&dir.join(&entry.csv), &csv)?;
        let rec = Record {
            channels,
            dt: increments(&times),
            times,
            values,
            norm: sidecar.norm,
            split: sidecar.split,
            meta: sidecar.meta,
            tag: sidecar.tag,
        };
        rec.validate()?;
        if rec.id() != entry.id || rec.tag != entry.split {
            return Err(Error::InvalidArgument(format!(
                "manifest entry {} disagrees with its sidecar",
                entry.id
            )));
        }
        records.push(rec);
    }
    Ok((manifest, records))
}

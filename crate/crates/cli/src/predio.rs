//! Prediction files: one long-format CSV per record, an index naming them,
//! and optional SVG line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lasslab_core::dataset::{denormalize, denormalize_times, Record};
use lasslab_core::eval::Prediction;
use lasslab_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "index.json";
pub const HEADER: &str = "time_s,t_norm,channel,predicted,truth,predicted_norm,truth_norm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionIndex {
    pub adapted: bool,
    /// Record id to CSV file name, relative to the index.
    pub records: BTreeMap<String, String>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

fn csv_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_owned(),
        line,
        detail: detail.into(),
    }
}

/// Truth columns are filled only where the query time is a record sample.
pub fn prediction_csv(rec: &Record, times: &[f64], normalized: &[Vec<f64>]) -> Result<String> {
    let physical = denormalize(rec, normalized)?;
    let truth_physical = denormalize(rec, &rec.values)?;
    let seconds = denormalize_times(rec, times);
    let mut out = String::from(HEADER);
    out.push('\n');
    for (j, name) in rec.channels.iter().enumerate() {
        for (k, &t) in times.iter().enumerate() {
            let sample = rec.times.iter().position(|&x| (x - t).abs() <= lasslab_core::eval::TIME_TOL);
            let (truth, truth_norm) = match sample {
                Some(i) => (truth_physical[j][i].to_string(), rec.values[j][i].to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                seconds[k], t, name, physical[j][k], truth, normalized[j][k], truth_norm
            );
        }
    }
    Ok(out)
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Deserialize)]
struct Row {
    t_norm: f64,
    channel: String,
    predicted_norm: f64,
}

/// Parses one prediction CSV back into normalized channel-major values,
/// ordering channels as in `rec`.
pub fn parse_prediction(path: &Path, rec: &Record) -> Result<Prediction> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, 0, e.to_string()))?;
    let mut per_channel: Vec<Vec<(f64, f64)>> = vec![Vec::new(); rec.n_channels()];
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| csv_err(path, line + 2, e.to_string()))?;
        let j = rec
            .channels
            .iter()
            .position(|c| *c == row.channel)
            .ok_or_else(|| csv_err(path, line + 2, format!("unknown channel {}", row.channel)))?;
        per_channel[j].push((row.t_norm, row.predicted_norm));
    }
    let times: Vec<f64> = per_channel[0].iter().map(|p| p.0).collect();
    for (j, ch) in per_channel.iter().enumerate() {
        if ch.len() != times.len() || ch.iter().zip(&times).any(|(p, t)| p.0 != *t) {
            return Err(csv_err(path, 0, format!("channel {} has a different time grid", rec.channels[j])));
        }
    }
    Ok(Prediction {
        id: rec.id().to_owned(),
        times,
        values: per_channel.into_iter().map(|c| c.into_iter().map(|p| p.1).collect()).collect(),
    })
}

pub fn read_index(dir: &Path) -> Result<PredictionIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}

pub fn index_path(dir: &Path) -> PathBuf {
    dir.join(INDEX_FILE)
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 120.0;
const MARGIN: f64 = 8.0;

fn polyline(times: &[f64], values: &[f64], lo: f64, hi: f64, top: f64, style: &str) -> String {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pts = String::new();
    for (t, v) in times.iter().zip(values) {
        let x = MARGIN + t * (PLOT_W - 2.0 * MARGIN);
        let y = top + MARGIN + (1.0 - (v - lo) / span) * (PLOT_H - 2.0 * MARGIN);
        let _ = write!(pts, "{x:.2},{y:.2} ");
    }
    format!("<polyline fill=\"none\" {style} points=\"{}\"/>\n", pts.trim_end())
}

/// One panel per channel in normalized units: prediction solid, truth
/// dashed, observed prefix shaded.
pub fn prediction_svg(rec: &Record, times: &[f64], normalized: &[Vec<f64>]) -> String {
    let height = PLOT_H * rec.n_channels() as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let prefix_w = rec.split.t_obs * (PLOT_W - 2.0 * MARGIN);
    for (j, name) in rec.channels.iter().enumerate() {
        let top = PLOT_H * j as f64;
        let (lo, hi) = normalized[j]
            .iter()
            .chain(&rec.values[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let _ = writeln!(
            s,
            "<rect x=\"{MARGIN}\" y=\"{top}\" width=\"{prefix_w:.2}\" height=\"{PLOT_H}\" fill=\"#eeeeee\"/>"
        );
        s += &polyline(&rec.times, &rec.values[j], lo, hi, top, "stroke=\"#888888\" stroke-dasharray=\"4 3\"");
        s += &polyline(times, &normalized[j], lo, hi, top, "stroke=\"#1f5fa8\" stroke-width=\"1.5\"");
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{name}</text>", MARGIN + 4.0, top + 16.0);
    }
    s + "</svg>\n"
}

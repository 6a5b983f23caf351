use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lasslab_core::bench::{inference_latency, time_integration, LatencyReport};
use lasslab_core::corpus::build_corpus;
use lasslab_core::dataset::{read_dataset, write_dataset, Record, SplitTag};
use lasslab_core::eval::eval_metrics;
use lasslab_core::lora::{attention_sites, extract_feature, finetune, fit_kmeans, ExpertBank, MixtureAdapter};
use lasslab_core::model::{init_params, load_checkpoint, predict_trajectory, Adapter};
use lasslab_core::training::{train, write_train_log, EpochLog, TrainConfig};
use lasslab_core::{Error, Mat};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, Resolved, RunConfig};
use crate::error::{CliError, Staged};
use crate::predio;

/// Files a command wrote, echoed into `run_summary.json`.
pub struct Outcome {
    pub summary_dir: PathBuf,
    pub outputs: Vec<PathBuf>,
}

fn require(path: &Path, key: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(key, format!("{} does not exist", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> lasslab_core::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_owned(),
        source: e,
    })? + "\n";
    predio::write_file(path, &text)
}

fn load_records(
    paths: &Resolved,
    command: &'static str,
    keep: impl Fn(&Record) -> bool,
) -> Result<Vec<Record>, CliError> {
    let (_, records) = read_dataset(&paths.dataset).stage(command, "read-dataset")?;
    let kept: Vec<Record> = records.into_iter().filter(|r| keep(r)).collect();
    if kept.is_empty() {
        return Err(CliError::Runtime {
            command,
            source: Error::InvalidArgument("no records carry the requested tags".into()).staged("select"),
        });
    }
    Ok(kept)
}

pub fn generate(cfg: &RunConfig, paths: &Resolved) -> Result<Outcome, CliError> {
    let records = build_corpus(&cfg.corpus, derive_seed(cfg.seed, "corpus")).stage("generate", "simulate")?;
    let manifest = write_dataset(&records, &paths.dataset).stage("generate", "write-dataset")?;
    let mut outputs = vec![paths.dataset.join("manifest.json")];
    for e in &manifest.records {
        outputs.push(paths.dataset.join(&e.csv));
        outputs.push(paths.dataset.join(&e.meta));
    }
    log::info!("generated {} records into {}", manifest.record_count, paths.dataset.display());
    Ok(Outcome {
        summary_dir: paths.dataset.clone(),
        outputs,
    })
}

pub fn pretrain(cfg: &RunConfig, paths: &Resolved) -> Result<Outcome, CliError> {
    require(&paths.dataset, "paths.dataset")?;
    let records = load_records(paths, "pretrain", |r| r.tag == SplitTag::Pretrain)?;
    let mut params = init_params(&cfg.model, derive_seed(cfg.seed, "init")).stage("pretrain", "init")?;
    let tcfg = TrainConfig {
        seed: derive_seed(cfg.seed, "pretrain"),
        ..cfg.pretrain.clone()
    };
    let report = train(&records, &mut params, &cfg.model, &tcfg, Some((&paths.model, cfg.checkpoint_dtype)))
        .stage("pretrain", "train")?;
    if let (Some(first), Some(last)) = (report.first_total(), report.last_total()) {
        log::info!("pretrained on {} records: total loss {first:.4e} -> {last:.4e}", records.len());
    }
    Ok(Outcome {
        summary_dir: paths.model.clone(),
        outputs: ["model.json", "model.bin", "train_log.csv"].iter().map(|f| paths.model.join(f)).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct ClusterReport {
    objective: f64,
    objective_trace: Vec<f64>,
    iterations: usize,
    coincident: bool,
    assignments: BTreeMap<String, usize>,
}

/// Clusters fine-tune features and writes a bank with untrained factors.
pub fn cluster(cfg: &RunConfig, paths: &Resolved) -> Result<Outcome, CliError> {
    require(&paths.dataset, "paths.dataset")?;
    require(&paths.model, "paths.model")?;
    let (mcfg, params) = load_checkpoint(&paths.model).stage("cluster", "load-model")?;
    let records = load_records(paths, "cluster", |r| r.tag == SplitTag::Finetune)?;
    let features = records
        .par_iter()
        .map(|r| extract_feature(&params, &mcfg, r))
        .collect::<lasslab_core::Result<Vec<_>>>()
        .stage("cluster", "feature")?;
    let d = features[0].len();
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    let feats = Mat::from_vec(features.len(), d, flat).stage("cluster", "feature")?;
    let lc = &cfg.lora;
    let fit = fit_kmeans(&feats, lc.n_clusters, derive_seed(cfg.seed, "cluster"), lc.max_iter, lc.restarts)
        .stage("cluster", "kmeans")?;
    let bank = ExpertBank::new(lc.clone(), fit.centroids.clone(), attention_sites(&mcfg), derive_seed(cfg.seed, "bank"))
        .stage("cluster", "bank")?;
    bank.save(&paths.bank, cfg.checkpoint_dtype).stage("cluster", "save-bank")?;
    let report = ClusterReport {
        objective: fit.objective(),
        objective_trace: fit.objective_trace.clone(),
        iterations: fit.iterations,
        coincident: fit.coincident,
        assignments: records.iter().map(|r| r.id().to_owned()).zip(fit.assignments.iter().copied()).collect(),
    };
    let report_path = paths.bank.join("clusters.json");
    write_json(&report_path, &report).stage("cluster", "write-report")?;
    log::info!("{} clusters over {} records, objective {:.4e}", lc.n_clusters, records.len(), report.objective);
    Ok(Outcome {
        summary_dir: paths.bank.clone(),
        outputs: vec![paths.bank.join("bank.json"), paths.bank.join("bank.bin"), report_path],
    })
}

/// Restarts the factors from the bank's centroids and seed, so rerunning
/// reproduces the same bank.
pub fn finetune_bank(cfg: &RunConfig, paths: &Resolved) -> Result<Outcome, CliError> {
    require(&paths.dataset, "paths.dataset")?;
    require(&paths.model, "paths.model")?;
    require(&paths.bank, "paths.bank")?;
    let (mcfg, params) = load_checkpoint(&paths.model).stage("finetune", "load-model")?;
    let fitted = ExpertBank::load(&paths.bank).stage("finetune", "load-bank")?;
    let mut bank = ExpertBank::new(fitted.config, fitted.centroids, fitted.sites, derive_seed(cfg.seed, "bank"))
        .stage("finetune", "bank")?;
    let records = load_records(paths, "finetune", |r| r.tag == SplitTag::Finetune)?;
    let tcfg = TrainConfig {
        seed: derive_seed(cfg.seed, "finetune"),
        ..cfg.finetune.clone()
    };
    let log_path = paths.bank.join("finetune_log.csv");
    let mut history: Vec<EpochLog> = Vec::new();
    let mut hook = |log: &EpochLog, _: &lasslab_core::ParamStore| {
        history.push(log.clone());
        write_train_log(&log_path, &history)
    };
    let report = finetune(&records, &params, &mcfg, &tcfg, &mut bank, &mut hook).stage("finetune", "train")?;
    bank.save(&paths.bank, cfg.checkpoint_dtype).stage("finetune", "save-bank")?;
    if let (Some(first), Some(last)) = (report.first_total(), report.last_total()) {
        log::info!("fine-tuned on {} records: total loss {first:.4e} -> {last:.4e}", records.len());
    }
    Ok(Outcome {
        summary_dir: paths.bank.clone(),
        outputs: vec![paths.bank.join("bank.json"), paths.bank.join("bank.bin"), log_path],
    })
}

pub fn predict(cfg: &RunConfig, paths: &Resolved, base_only: bool) -> Result<Outcome, CliError> {
    require(&paths.dataset, "paths.dataset")?;
    require(&paths.model, "paths.model")?;
    let use_bank = cfg.predict.adapter && !base_only && paths.bank.join("bank.json").exists();
    let (mcfg, params) = load_checkpoint(&paths.model).stage("predict", "load-model")?;
    let bank = if use_bank {
        Some(ExpertBank::load(&paths.bank).stage("predict", "load-bank")?)
    } else {
        None
    };
    let adapter = bank.as_ref().map(MixtureAdapter::new);
    let adapter_ref = adapter.as_ref().map(|a| a as &dyn Adapter);
    let records = load_records(paths, "predict", |r| cfg.predict.tags.contains(&r.tag))?;
    let dir = &paths.predictions;
    let files = records
        .par_iter()
        .map(|rec| -> lasslab_core::Result<Vec<PathBuf>> {
            let pred = predict_trajectory(&params, &mcfg, rec, &rec.times, adapter_ref)?;
            let csv_path = dir.join(format!("{}.csv", rec.id()));
            predio::write_file(&csv_path, &predio::prediction_csv(rec, &rec.times, &pred)?)?;
            let mut written = vec![csv_path];
            if cfg.predict.svg {
                let svg_path = dir.join(format!("{}.svg", rec.id()));
                predio::write_file(&svg_path, &predio::prediction_svg(rec, &rec.times, &pred))?;
                written.push(svg_path);
            }
            Ok(written)
        })
        .collect::<lasslab_core::Result<Vec<_>>>()
        .stage("predict", "forward")?;
    let index = predio::PredictionIndex {
        adapted: adapter.is_some(),
        records: records.iter().map(|r| (r.id().to_owned(), format!("{}.csv", r.id()))).collect(),
    };
    let index_path = predio::index_path(dir);
    write_json(&index_path, &index).stage("predict", "write-index")?;
    let mut outputs = vec![index_path];
    outputs.extend(files.into_iter().flatten());
    log::info!(
        "predicted {} records ({}) into {}",
        records.len(),
        if index.adapted { "adapted" } else { "base" },
        dir.display()
    );
    Ok(Outcome {
        summary_dir: dir.clone(),
        outputs,
    })
}

pub fn eval(cfg: &RunConfig, paths: &Resolved) -> Result<Outcome, CliError> {
    require(&paths.dataset, "paths.dataset")?;
    require(&paths.predictions, "paths.predictions")?;
    let index = predio::read_index(&paths.predictions).stage("eval", "read-index")?;
    let (_, records) = read_dataset(&paths.dataset).stage("eval", "read-dataset")?;
    let by_id: BTreeMap<&str, &Record> = records.iter().map(|r| (r.id(), r)).collect();
    let mut predictions = Vec::with_capacity(index.records.len());
    for (id, file) in &index.records {
        let rec = by_id.get(id.as_str()).ok_or_else(|| CliError::Runtime {
            command: "eval",
            source: Error::InvalidArgument(format!("prediction {id} has no record in the dataset")).staged("match"),
        })?;
        predictions.push(predio::parse_prediction(&paths.predictions.join(file), rec).stage("eval", "read-predictions")?);
    }
    let report = eval_metrics(&predictions, &records, cfg.eval.horizon).stage("eval", "score")?;
    let dir = paths.predictions.join("eval");
    let csv_path = dir.join("eval_report.csv");
    let json_path = dir.join("eval_report.json");
    report.write_csv(&csv_path).stage("eval", "write-report")?;
    write_json(&json_path, &report).stage("eval", "write-report")?;
    for g in &report.groups {
        log::info!(
            "{} (prefix {}): {} records, MSE {:.4} x1e-2",
            g.tag.as_str(),
            g.prefix_ratio,
            g.n_records,
            g.mse * lasslab_core::eval::REPORT_SCALE
        );
    }
    Ok(Outcome {
        summary_dir: dir,
        outputs: vec![csv_path, json_path],
    })
}

#[derive(Serialize)]
struct LatencySummary {
    base: LatencyReport,
    adapted: Option<LatencyReport>,
    /// Adapted over base median wall time.
    overhead_ratio: Option<f64>,
    parallel: bool,
}

pub fn bench(cfg: &RunConfig, paths: &Resolved) -> Result<Outcome, CliError> {
    let b = &cfg.bench;
    let report =
        time_integration(&b.cost, &b.n_steps, b.repeats, derive_seed(cfg.seed, "bench")).stage("bench", "integration")?;
    let csv_path = paths.bench.join("bench_report.csv");
    report.write_csv(&csv_path).stage("bench", "write-report")?;
    for &n in &b.n_steps {
        if let (Some(m), Some(a)) = (report.speedup(n), report.analytic_speedup(n)) {
            log::info!("n_step {n}: measured speedup {m:.2}, analytic {a:.2}");
        }
    }
    let mut outputs = vec![csv_path];

    if paths.dataset.exists() && b.latency_records > 0 {
        let (mcfg, params) = if paths.model.join("model.json").exists() {
            load_checkpoint(&paths.model).stage("bench", "load-model")?
        } else {
            let p = init_params(&cfg.model, derive_seed(cfg.seed, "init")).stage("bench", "init")?;
            (cfg.model.clone(), p)
        };
        let (_, all) = read_dataset(&paths.dataset).stage("bench", "read-dataset")?;
        let records: Vec<Record> = all.iter().cycle().take(b.latency_records).cloned().collect();
        let base = inference_latency(&params, &mcfg, &records, None, b.latency_runs, b.parallel).stage("bench", "latency")?;
        let adapted = if paths.bank.join("bank.json").exists() {
            let bank = ExpertBank::load(&paths.bank).stage("bench", "load-bank")?;
            let adapter = MixtureAdapter::new(&bank);
            Some(
                inference_latency(&params, &mcfg, &records, Some(&adapter), b.latency_runs, b.parallel)
                    .stage("bench", "latency")?,
            )
        } else {
            None
        };
        let overhead_ratio = adapted
            .as_ref()
            .filter(|_| base.median_seconds > 0.0)
            .map(|a| a.median_seconds / base.median_seconds);
        let latency_path = paths.bench.join("latency.json");
        write_json(
            &latency_path,
            &LatencySummary {
                base,
                adapted,
                overhead_ratio,
                parallel: b.parallel,
            },
        )
        .stage("bench", "write-report")?;
        outputs.push(latency_path);
    } else {
        log::info!("no dataset at {}; skipping inference latency", paths.dataset.display());
    }
    Ok(Outcome {
        summary_dir: paths.bench.clone(),
        outputs,
    })
}

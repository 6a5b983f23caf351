use std::path::{Path, PathBuf};

use lasslab_core::bench::CostModel;
use lasslab_core::corpus::CorpusSpec;
use lasslab_core::dataset::SplitTag;
use lasslab_core::eval::Horizon;
use lasslab_core::lora::LoraConfig;
use lasslab_core::training::TrainConfig;
use lasslab_core::{Dtype, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub lora: LoraConfig,
    pub finetune: TrainConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub checkpoint_dtype: Dtype,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusSpec::standard(8),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            lora: LoraConfig::default(),
            finetune: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            predict: PredictConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            checkpoint_dtype: Dtype::F32,
        }
    }
}

/// Unset artifact paths default to subdirectories of `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("runs"),
            dataset: None,
            model: None,
            bank: None,
            predictions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub tags: Vec<SplitTag>,
    /// Route through the expert bank when one is present.
    pub adapter: bool,
    pub svg: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            tags: vec![SplitTag::Test, SplitTag::ZeroShot],
            adapter: true,
            svg: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizon: Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub cost: CostModel,
    pub n_steps: Vec<usize>,
    pub repeats: usize,
    pub latency_records: usize,
    pub latency_runs: usize,
    /// Predicts records in parallel during latency runs.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            cost: CostModel::default(),
            n_steps: vec![10, 100, 1_000, 10_000],
            repeats: 20,
            latency_records: 64,
            latency_runs: 5,
            parallel: false,
        }
    }
}

/// Absolute artifact locations for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub bank: PathBuf,
    pub predictions: PathBuf,
    pub bench: PathBuf,
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::config("paths", e.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("<file>", format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError::config(if key == "." { "<root>" } else { &key }, e.into_inner().to_string())
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |key: &str, r: lasslab_core::Result<()>| r.map_err(|e| CliError::config(key, e.to_string()));
        check("model", self.model.validate())?;
        check("pretrain", self.pretrain.validate())?;
        check("finetune", self.finetune.validate())?;
        check("lora", self.lora.validate())?;
        check("bench.cost", self.bench.cost.validate())?;
        if !(self.corpus.prefix_ratio > 0.0 && self.corpus.prefix_ratio < 1.0) {
            return Err(CliError::config("corpus.prefix_ratio", "must lie in (0, 1)"));
        }
        if self.predict.tags.is_empty() {
            return Err(CliError::config("predict.tags", "at least one tag is required"));
        }
        if self.bench.n_steps.is_empty() || self.bench.latency_runs == 0 {
            return Err(CliError::config("bench", "n_steps and latency_runs must be non-empty"));
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let out = absolute(&self.paths.out)?;
        let pick = |p: &Option<PathBuf>, name: &str| match p {
            Some(p) => absolute(p),
            None => Ok(out.join(name)),
        };
        Ok(Resolved {
            dataset: pick(&self.paths.dataset, "dataset")?,
            model: pick(&self.paths.model, "model")?,
            bank: pick(&self.paths.bank, "bank")?,
            predictions: pick(&self.paths.predictions, "predictions")?,
            bench: out.join("bench"),
        })
    }

    /// SHA-256 of the effective configuration's JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Independent per-purpose seed derived from the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let digest = Sha256::digest(format!("lasslab:{seed}:{purpose}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

//! Trajectory-conditioned mixture of low-rank adapters on the attention
//! projections of a frozen base model.

mod adapter;
mod kmeans;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Dtype, TensorEntry};
use crate::error::{Error, Result};
use crate::model::params::trunc_normal;
use crate::model::{attn_site, ModelConfig, ParamStore};
use crate::tensor::Mat;

pub use adapter::{
    adapted_site_weights, apply_delta, extract_feature, finetune, mix_delta, route, LoraObjective, MixtureAdapter,
    RoutingWeights, unit_feature, weights_from_scores, FEATURE_FLOOR,
};
pub use kmeans::{fit_kmeans, kmeans_objective, KMeansFit};

pub const BANK_FORMAT: &str = "lasslab-bank/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub n_clusters: usize,
    pub rank: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            n_clusters: 3,
            rank: 4,
            alpha: 8.0,
            temperature: 0.1,
            restarts: 5,
            max_iter: 100,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("lora config: {m}")));
        if self.n_clusters == 0 {
            return bad("n_clusters must be at least 1");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite");
        }
        if self.restarts == 0 || self.max_iter == 0 {
            return bad("restarts and max_iter must be at least 1");
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// An adapted weight matrix, `d_out × d_in`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Site {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
}

/// `K` experts of per-site factors `U (r × d_in)` and `V (d_out × r)`, the
/// frozen unit centroids they are routed by, and the routing temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub config: LoraConfig,
    /// One unit-norm centroid per row.
    pub centroids: Mat,
    pub sites: Vec<Site>,
    /// Factor tensors named by [`ExpertBank::u_name`] and [`ExpertBank::v_name`].
    pub factors: ParamStore,
}

/// Every attention projection of every block.
pub fn attention_sites(cfg: &ModelConfig) -> Vec<Site> {
    (0..cfg.n_blocks)
        .flat_map(|l| ['q', 'k', 'v', 'o'].map(|c| attn_site(l, c)))
        .map(|name| Site {
            name,
            d_out: cfg.d_model,
            d_in: cfg.d_model,
        })
        .collect()
}

impl ExpertBank {
    /// Fresh experts with Gaussian `U` and zero `V`, so the bank starts as an
    /// exact no-op.
    pub fn new(config: LoraConfig, centroids: Mat, sites: Vec<Site>, seed: u64) -> Result<Self> {
        config.validate()?;
        if centroids.rows() != config.n_clusters {
            return Err(Error::InvalidArgument(format!(
                "{} centroids for {} clusters",
                centroids.rows(),
                config.n_clusters
            )));
        }
        for s in &sites {
            if config.rank * 4 > s.d_in.min(s.d_out) {
                return Err(Error::InvalidArgument(format!(
                    "rank {} too large for site {} ({}x{})",
                    config.rank, s.name, s.d_out, s.d_in
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut factors = ParamStore::new();
        for m in 0..config.n_clusters {
            for s in &sites {
                let u = trunc_normal(&mut rng, config.rank, s.d_in, 1.0 / (s.d_in as f64).sqrt());
                factors.insert(Self::u_name(m, &s.name), u);
                factors.insert(Self::v_name(m, &s.name), Mat::zeros(s.d_out, config.rank));
            }
        }
        let bank = ExpertBank {
            config,
            centroids,
            sites,
            factors,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn u_name(expert: usize, site: &str) -> String {
        format!("expert.{expert}.{site}.u")
    }

    pub fn v_name(expert: usize, site: &str) -> String {
        format!("expert.{expert}.{site}.v")
    }

    pub fn n_experts(&self) -> usize {
        self.config.n_clusters
    }

    pub fn site(&self, name: &str) -> Result<&Site> {
        self.sites
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSite(name.to_owned()))
    }

    /// Number of trainable factor values.
    pub fn n_parameters(&self) -> usize {
        self.factors.n_values()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.centroids.rows() != self.config.n_clusters {
            return Err(Error::InvalidArgument("expert count differs from centroid count".into()));
        }
        for r in 0..self.centroids.rows() {
            let n = self.centroids.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("centroid {r} has norm {n}")));
            }
        }
        for m in 0..self.n_experts() {
            for s in &self.sites {
                let u = self.factors.get(&Self::u_name(m, &s.name))?;
                let v = self.factors.get(&Self::v_name(m, &s.name))?;
                if u.shape() != (self.config.rank, s.d_in) || v.shape() != (s.d_out, self.config.rank) {
                    return Err(Error::shape("expert bank", format!("factors of expert {m} at {}", s.name)));
                }
            }
        }
        if self.factors.len() != 2 * self.n_experts() * self.sites.len() {
            return Err(Error::InvalidArgument("expert bank holds unexpected factor tensors".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (tensors, bytes) = checkpoint::encode_tensors(self.factors.iter(), dtype);
        checkpoint::write_bytes(&dir.join("bank.bin"), &bytes)?;
        let manifest = BankManifest {
            format_version: BANK_FORMAT.into(),
            config: self.config.clone(),
            sites: self.sites.clone(),
            centroids: (0..self.centroids.rows()).map(|r| self.centroids.row(r).to_vec()).collect(),
            tensors,
        };
        checkpoint::write_json(&dir.join("bank.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BankManifest = checkpoint::read_json(&dir.join("bank.json"))?;
        if manifest.format_version != BANK_FORMAT {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: BANK_FORMAT.into(),
            });
        }
        let bytes = checkpoint::read_bytes(&dir.join("bank.bin"))?;
        let mut factors = ParamStore::new();
        for (name, m) in checkpoint::decode_tensors(&manifest.tensors, &bytes)? {
            factors.insert(name, m);
        }
        let centroids = Mat::from_rows(&manifest.centroids).map_err(|_| Error::Checkpoint("ragged centroids".into()))?;
        let bank = ExpertBank {
            config: manifest.config,
            centroids,
            sites: manifest.sites,
            factors,
        };
        bank.validate()?;
        Ok(bank)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankManifest {
    format_version: String,
    config: LoraConfig,
    sites: Vec<Site>,
    centroids: Vec<Vec<f64>>,
    tensors: Vec<TensorEntry>,
}

use std::path::Path;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::checkpoint::{self, Dtype, TensorEntry};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MODEL_FORMAT: &str = "lasslab-model/1";
const INIT_STD: f64 = 0.02;

/// Named model tensors in a fixed enumeration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: IndexMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in &self.tensors {
            if !m.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("parameter {name}"),
                });
            }
        }
        Ok(())
    }

    /// Resolves a flat coordinate into (tensor name, offset) in enumeration order.
    pub fn locate(&self, mut flat: usize) -> Option<(&str, usize)> {
        for (name, m) in &self.tensors {
            if flat < m.len() {
                return Some((name.as_str(), flat));
            }
            flat -= m.len();
        }
        None
    }

    /// Names and shapes must agree with `reference`.
    pub fn check_layout(&self, reference: &ParamStore) -> Result<()> {
        if self.len() != reference.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.len(),
                self.len()
            )));
        }
        for ((a, ma), (b, mb)) in self.iter().zip(reference.iter()) {
            if a != b || ma.shape() != mb.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {a} {:?} does not match expected {b} {:?}",
                    ma.shape(),
                    mb.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn attn_site(block: usize, proj: char) -> String {
    format!("blocks.{block}.attn.{proj}.weight")
}

pub fn gru_gates() -> [&'static str; 3] {
    ["z", "r", "n"]
}

/// Builds a freshly initialized store in the canonical enumeration order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let dm = cfg.d_model;

    for gate in gru_gates() {
        p.insert(format!("encoder.gru.{gate}.w_in"), trunc_normal(&mut rng, cfg.d_h, 2, INIT_STD));
        p.insert(format!("encoder.gru.{gate}.w_rec"), orthogonal(&mut rng, cfg.d_h));
        p.insert(format!("encoder.gru.{gate}.bias"), Mat::zeros(1, cfg.d_h));
    }
    linear(&mut p, &mut rng, "embed.value.fc1", cfg.d_h, cfg.d_hidden);
    linear(&mut p, &mut rng, "embed.value.fc2", cfg.d_hidden, dm);
    linear(&mut p, &mut rng, "embed.time.fc1", cfg.n_rbf_centers, cfg.d_hidden);
    linear(&mut p, &mut rng, "embed.time.fc2", cfg.d_hidden, 2 * dm);
    p.insert("embed.channel_codes", trunc_normal(&mut rng, cfg.max_channels, dm, INIT_STD));
    if cfg.n_csh_tokens > 0 {
        p.insert("csh.tokens", trunc_normal(&mut rng, cfg.n_csh_tokens, dm, INIT_STD));
    }
    for l in 0..cfg.n_blocks {
        for proj in ['q', 'k', 'v', 'o'] {
            p.insert(attn_site(l, proj), trunc_normal(&mut rng, dm, dm, INIT_STD));
        }
        p.insert(format!("blocks.{l}.moe.gate.weight"), trunc_normal(&mut rng, cfg.n_moe_experts, dm, INIT_STD));
        for e in 0..cfg.n_moe_experts {
            linear(&mut p, &mut rng, &format!("blocks.{l}.moe.expert.{e}.fc1"), dm, cfg.d_ff);
            linear(&mut p, &mut rng, &format!("blocks.{l}.moe.expert.{e}.fc2"), cfg.d_ff, dm);
        }
    }
    linear(&mut p, &mut rng, "latent.mu", cfg.d_h, cfg.d_z);
    linear(&mut p, &mut rng, "latent.log_std", cfg.d_h, cfg.d_z);
    linear(&mut p, &mut rng, "head.fc1", dm, cfg.d_hidden);
    p.insert("head.fc2.weight", Mat::zeros(cfg.head_width(), cfg.d_hidden));
    p.insert("head.fc2.bias", Mat::zeros(1, cfg.head_width()));
    let readout_std = 1.0 / (cfg.d_z as f64).sqrt();
    p.insert("decoder.weight", trunc_normal(&mut rng, 1, cfg.d_z, readout_std));
    p.insert("decoder.bias", Mat::zeros(1, 1));
    Ok(p)
}

fn linear(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, d_out: usize) {
    p.insert(format!("{prefix}.weight"), trunc_normal(rng, d_out, d_in, INIT_STD));
    p.insert(format!("{prefix}.bias"), Mat::zeros(1, d_out));
}

/// Normal draws resampled outside two standard deviations.
pub(crate) fn trunc_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = loop {
            let x: f64 = rng.sample(StandardNormal);
            if x.abs() <= 2.0 {
                break x * std;
            }
        };
    }
    m
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = q[(i, j)];
        }
    }
    m
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format_version: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes `model.json` and `model.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, params: &ParamStore, dtype: Dtype) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (tensors, bytes) = checkpoint::encode_tensors(params.iter(), dtype);
    checkpoint::write_bytes(&dir.join("model.bin"), &bytes)?;
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT.into(),
        config: cfg.clone(),
        tensors,
    };
    checkpoint::write_json(&dir.join("model.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ParamStore)> {
    let manifest: ModelManifest = checkpoint::read_json(&dir.join("model.json"))?;
    if manifest.format_version != MODEL_FORMAT {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: MODEL_FORMAT.into(),
        });
    }
    manifest.config.validate()?;
    let bytes = checkpoint::read_bytes(&dir.join("model.bin"))?;
    let mut params = ParamStore::new();
    for (name, m) in checkpoint::decode_tensors(&manifest.tensors, &bytes)? {
        params.insert(name, m);
    }
    params.check_layout(&init_params(&manifest.config, 0)?)?;
    Ok((manifest.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_ordered() {
        let cfg = ModelConfig::tiny();
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&cfg, 4).unwrap());
        let names: Vec<_> = a.names().collect();
        assert_eq!(names[0], "encoder.gru.z.w_in");
        assert_eq!(*names.last().unwrap(), "decoder.bias");
        a.check_finite().unwrap();
    }

    #[test]
    fn init_conventions() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 1).unwrap();
        let u = p.get("encoder.gru.r.w_rec").unwrap();
        let utu = u.matmul_tn(u);
        assert!(utu.sub(&Mat::eye(cfg.d_h)).max_abs() < 1e-12);
        assert_eq!(p.get("head.fc2.weight").unwrap().max_abs(), 0.0);
        assert_eq!(p.get("embed.value.fc1.bias").unwrap().max_abs(), 0.0);
        let w = p.get("blocks.0.attn.q.weight").unwrap();
        assert!(w.max_abs() <= 2.0 * INIT_STD);
        assert!(w.max_abs() > 0.0);
    }

    #[test]
    fn locate_walks_enumeration() {
        let p = init_params(&ModelConfig::tiny(), 0).unwrap();
        let first = p.get("encoder.gru.z.w_in").unwrap().len();
        assert_eq!(p.locate(0), Some(("encoder.gru.z.w_in", 0)));
        assert_eq!(p.locate(first), Some(("encoder.gru.z.w_rec", 0)));
        assert_eq!(p.locate(p.n_values()), None);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 9).unwrap();
        save_checkpoint(dir.path(), &cfg, &p, Dtype::F64).unwrap();
        let (cfg2, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, p2);

        save_checkpoint(dir.path(), &cfg, &p, Dtype::F32).unwrap();
        let (_, p32) = load_checkpoint(dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join("model.bin")).unwrap();
        assert_eq!(bytes.len(), p.n_values() * 4);
        save_checkpoint(dir.path(), &cfg, &p32, Dtype::F32).unwrap();
        assert_eq!(std::fs::read(dir.path().join("model.bin")).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_rejects_short_binary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 9).unwrap();
        save_checkpoint(dir.path(), &cfg, &p, Dtype::F32).unwrap();
        let path = dir.path().join("model.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}

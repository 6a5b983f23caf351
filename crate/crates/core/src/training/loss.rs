use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::model::{forward, Adapter, Bound, Latent, ModelConfig, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Train,
    Eval,
}

/// Numeric initial-state draw for a batch of channel summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentInit {
    pub mu: Mat,
    pub log_std: Mat,
    pub z0: Mat,
}

fn affine(params: &ParamStore, prefix: &str, h: &Mat) -> Result<Mat> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    if w.cols() != h.cols() {
        return Err(Error::shape("sample_latent", "summary width differs from latent projection"));
    }
    let mut y = h.matmul_nt(w);
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b.row(0)) {
            *v += bias;
        }
    }
    Ok(y)
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// `z₀ = μ + exp(s) ⊙ ε` in train mode, `μ` in eval mode.
pub fn sample_latent(h: &Mat, params: &ParamStore, mode: LatentMode, rng: &mut impl Rng) -> Result<LatentInit> {
    let mu = affine(params, "latent.mu", h)?;
    let log_std = affine(params, "latent.log_std", h)?;
    let z0 = match mode {
        LatentMode::Eval => mu.clone(),
        LatentMode::Train => {
            let eps = standard_normal(rng, mu.rows(), mu.cols());
            let mut z = mu.clone();
            for ((z, s), e) in z.as_mut_slice().iter_mut().zip(log_std.as_slice()).zip(eps.as_slice()) {
                *z += s.exp() * e;
            }
            z
        }
    };
    Ok(LatentInit { mu, log_std, z0 })
}

/// KL of `N(μ, exp(s)²)` against `N(0, I)`, summed over latent dimensions
/// and averaged over rows.
pub fn kl_divergence(mu: &Mat, log_std: &Mat) -> f64 {
    let total: f64 = mu
        .as_slice()
        .iter()
        .zip(log_std.as_slice())
        .map(|(m, s)| m * m + (2.0 * s).exp() - 1.0 - 2.0 * s)
        .sum();
    0.5 * total / mu.rows().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub kl: f64,
    pub lb: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.mse.is_finite() && self.kl.is_finite() && self.lb.is_finite() && self.total.is_finite()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub mse: Var,
    pub kl: Var,
    pub lb: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            mse: g.scalar(self.mse),
            kl: g.scalar(self.kl),
            lb: g.scalar(self.lb),
            total: g.scalar(self.total),
        }
    }
}

/// Full-horizon reconstruction targets, optionally padded with masked
/// entries at `t = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub times: Vec<f64>,
    pub values: Mat,
    pub mask: Mat,
}

impl Target {
    pub fn full_horizon(rec: &Record) -> Result<Self> {
        if rec.n_samples() <= rec.split.n_observed {
            return Err(Error::InvalidArgument(format!("record {} carries no future ground truth", rec.id())));
        }
        let n = rec.n_samples();
        let mut values = Mat::zeros(rec.n_channels(), n);
        for (j, ch) in rec.values.iter().enumerate() {
            values.row_mut(j).copy_from_slice(ch);
        }
        Ok(Target {
            times: rec.times.clone(),
            values,
            mask: Mat::filled(rec.n_channels(), n, 1.0),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn padded(&self, len: usize) -> Target {
        let n = self.len();
        if len <= n {
            return self.clone();
        }
        let rows = self.values.rows();
        let mut values = Mat::zeros(rows, len);
        let mut mask = Mat::zeros(rows, len);
        values.set_block(0, 0, &self.values);
        mask.set_block(0, 0, &self.mask);
        let mut times = self.times.clone();
        times.resize(len, 1.0);
        Target { times, values, mask }
    }
}

/// Builds `mse + β_kl·kl + λ_lb·lb` for one record on `g`.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    rec: &Record,
    target: &Target,
    latent: Latent<'_>,
    adapter: Option<&dyn Adapter>,
) -> Result<LossVars> {
    let out = forward(g, p, cfg, rec, &target.times, latent, adapter)?;
    let y = g.constant(target.values.clone());
    let mask = g.constant(target.mask.clone());
    let count = target.mask.sum();
    if !(count > 0.0) {
        return Err(Error::InvalidArgument("target mask selects no samples".into()));
    }
    let diff = g.sub(out.prediction, y);
    let sq = g.square(diff);
    let masked = g.mul(sq, mask);
    let total_sq = g.sum(masked);
    let mse = g.scale(total_sq, 1.0 / count);

    let mu_sq = g.square(out.mu);
    let two_s = g.scale(out.log_std, 2.0);
    let var = g.exp(two_s);
    let a = g.add(mu_sq, var);
    let a = g.sub(a, two_s);
    let a = g.add_scalar(a, -1.0);
    let kl_sum = g.sum(a);
    let kl = g.scale(kl_sum, 0.5 / rec.n_channels() as f64);

    let lb = out.load_balance;
    let wkl = g.scale(kl, tcfg.beta_kl);
    let wlb = g.scale(lb, tcfg.lambda_lb);
    let total = g.add(mse, wkl);
    let total = g.add(total, wlb);
    Ok(LossVars { mse, kl, lb, total })
}

/// Loss of one record under a single reparameterized draw from `rng`.
pub fn compute_loss(
    rec: &Record,
    params: &ParamStore,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let target = Target::full_horizon(rec)?;
    let eps = standard_normal(rng, rec.n_channels(), cfg.d_z);
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params);
    let lv = loss_graph(&mut g, &p, cfg, tcfg, rec, &target, Latent::Sample(&eps), None)?;
    Ok(lv.values(&g))
}

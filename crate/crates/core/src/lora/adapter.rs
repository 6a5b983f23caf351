use super::ExpertBank;
use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::model::{summarize, Adapter, Bound, Latent, ModelConfig, ParamStore};
use crate::tape::{softmax_in_place, Graph, Var};
use crate::tensor::{dot, Mat};
use crate::training::{fit, loss_graph, EpochLog, LossVars, Objective, Target, TrainConfig, TrainReport};

/// Channel-mean features with a smaller norm are rejected.
pub const FEATURE_FLOOR: f64 = 1e-12;

/// Unit routing feature of a record: the channel-mean encoder state,
/// normalized.
pub fn extract_feature(params: &ParamStore, cfg: &ModelConfig, rec: &Record) -> Result<Vec<f64>> {
    let h = summarize(params, cfg, rec)?;
    let mut mean = vec![0.0; h.cols()];
    for r in 0..h.rows() {
        for (m, x) in mean.iter_mut().zip(h.row(r)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= h.rows() as f64;
    }
    unit_feature(mean)
}

/// Divides by the L2 norm, rejecting vectors below [`FEATURE_FLOOR`].
pub fn unit_feature(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = dot(&v, &v).sqrt();
    if !n.is_finite() {
        return Err(Error::NonFinite {
            context: "routing feature".into(),
        });
    }
    if n < FEATURE_FLOOR {
        return Err(Error::DegenerateFeature);
    }
    for x in &mut v {
        *x /= n;
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights {
    /// Cosine similarity to each centroid.
    pub scores: Vec<f64>,
    /// Softmax of `scores / τ`.
    pub weights: Vec<f64>,
}

/// One dot product per centroid, then a tempered softmax.
pub fn route(feature: &[f64], bank: &ExpertBank) -> Result<RoutingWeights> {
    if feature.len() != bank.centroids.cols() {
        return Err(Error::shape(
            "route",
            format!("feature has {} dims, centroids {}", feature.len(), bank.centroids.cols()),
        ));
    }
    let scores = (0..bank.n_experts()).map(|m| dot(feature, bank.centroids.row(m))).collect();
    Ok(weights_from_scores(scores, bank.config.temperature))
}

pub fn weights_from_scores(scores: Vec<f64>, temperature: f64) -> RoutingWeights {
    let mut weights: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    softmax_in_place(&mut weights);
    RoutingWeights { scores, weights }
}

fn check_weights(weights: &RoutingWeights, bank: &ExpertBank) -> Result<()> {
    if weights.weights.len() != bank.n_experts() {
        return Err(Error::shape("mix", "routing weights do not match expert count"));
    }
    Ok(())
}

/// Dense `(α/r) Σ_m π_m V_m U_m` for one site.
pub fn mix_delta(weights: &RoutingWeights, bank: &ExpertBank, site: &str) -> Result<Mat> {
    check_weights(weights, bank)?;
    let s = bank.site(site)?;
    let mut delta = Mat::zeros(s.d_out, s.d_in);
    for (m, &pi) in weights.weights.iter().enumerate() {
        let u = bank.factors.get(&ExpertBank::u_name(m, site))?;
        let v = bank.factors.get(&ExpertBank::v_name(m, site))?;
        delta.axpy(pi, &v.matmul(u));
    }
    Ok(delta.scale(bank.config.scaling()))
}

/// `ΔW · x` through the factors, without forming ΔW.
pub fn apply_delta(weights: &RoutingWeights, bank: &ExpertBank, site: &str, x: &[f64]) -> Result<Vec<f64>> {
    check_weights(weights, bank)?;
    let s = bank.site(site)?;
    if x.len() != s.d_in {
        return Err(Error::shape("apply_delta", format!("input has {} dims, site {}", x.len(), s.d_in)));
    }
    let x = Mat::col_vector(x);
    let mut out = Mat::zeros(s.d_out, 1);
    for (m, &pi) in weights.weights.iter().enumerate() {
        let u = bank.factors.get(&ExpertBank::u_name(m, site))?;
        let v = bank.factors.get(&ExpertBank::v_name(m, site))?;
        out.axpy(pi, &v.matmul(&u.matmul(&x)));
    }
    Ok(out.scale(bank.config.scaling()).into_vec())
}

/// Base weights plus the routed delta at every adapted site for one record.
pub fn adapted_site_weights(
    params: &ParamStore,
    cfg: &ModelConfig,
    bank: &ExpertBank,
    rec: &Record,
) -> Result<Vec<(String, Mat)>> {
    let weights = route(&extract_feature(params, cfg, rec)?, bank)?;
    bank.sites
        .iter()
        .map(|s| Ok((s.name.clone(), params.get(&s.name)?.add(&mix_delta(&weights, bank, &s.name)?))))
        .collect()
}

/// Routes on the encoder summary and emits the mixed delta for every site.
/// Factors come from `factors` when given (so they can be trained), and are
/// otherwise bound as constants from the bank.
pub struct MixtureAdapter<'a> {
    bank: &'a ExpertBank,
    factors: Option<&'a Bound>,
}

impl<'a> MixtureAdapter<'a> {
    pub fn new(bank: &'a ExpertBank) -> Self {
        MixtureAdapter { bank, factors: None }
    }

    pub fn bound(bank: &'a ExpertBank, factors: &'a Bound) -> Self {
        MixtureAdapter {
            bank,
            factors: Some(factors),
        }
    }

    fn factor(&self, g: &mut Graph, name: &str) -> Result<Var> {
        match self.factors {
            Some(b) => b.get(name),
            None => Ok(g.constant(self.bank.factors.get(name)?.clone())),
        }
    }

    /// Routing weights as a `1 × K` node.
    fn routing(&self, g: &mut Graph, summary: Var) -> Result<Var> {
        let mean = g.mean_rows(summary);
        let norm = g.value(mean).norm_fro();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "routing feature".into(),
            });
        }
        if norm < FEATURE_FLOOR {
            return Err(Error::DegenerateFeature);
        }
        if g.value(mean).cols() != self.bank.centroids.cols() {
            return Err(Error::shape("route", "summary width differs from centroid width"));
        }
        let feature = g.l2_normalize_rows(mean, FEATURE_FLOOR);
        let centroids = g.constant(self.bank.centroids.clone());
        let scores = g.matmul_nt(feature, centroids);
        let logits = g.scale(scores, 1.0 / self.bank.config.temperature);
        Ok(g.softmax_rows(logits))
    }
}

impl Adapter for MixtureAdapter<'_> {
    fn site_deltas(&self, g: &mut Graph, summary: Var) -> Result<Vec<(String, Var)>> {
        let pi = self.routing(g, summary)?;
        let scaling = self.bank.config.scaling();
        let mut out = Vec::with_capacity(self.bank.sites.len());
        for s in &self.bank.sites {
            let mut acc: Option<Var> = None;
            for m in 0..self.bank.n_experts() {
                let u = self.factor(g, &ExpertBank::u_name(m, &s.name))?;
                let v = self.factor(g, &ExpertBank::v_name(m, &s.name))?;
                let vu = g.matmul(v, u);
                let term = g.scale_by(vu, pi, m);
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            }
            let delta = acc.expect("bank has at least one expert");
            out.push((s.name.clone(), g.scale(delta, scaling)));
        }
        Ok(out)
    }
}

/// Training loss of the adapted model. The trainable binding holds the
/// bank factors; any base tensor it also holds overrides the frozen copy.
pub struct LoraObjective<'a> {
    pub cfg: &'a ModelConfig,
    pub tcfg: &'a TrainConfig,
    pub base: &'a ParamStore,
    pub bank: &'a ExpertBank,
}

impl Objective for LoraObjective<'_> {
    fn latent_dim(&self) -> usize {
        self.cfg.d_z
    }

    fn record_loss(
        &self,
        g: &mut Graph,
        trainable: &Bound,
        rec: &Record,
        target: &Target,
        latent: Latent<'_>,
    ) -> Result<LossVars> {
        let base = Bound::overlay(g, self.base, trainable);
        let adapter = MixtureAdapter::bound(self.bank, trainable);
        loss_graph(g, &base, self.cfg, self.tcfg, rec, target, latent, Some(&adapter))
    }
}

/// Trains the bank factors against a frozen base. Centroids and base
/// parameters are read-only throughout.
pub fn finetune(
    records: &[Record],
    base: &ParamStore,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    bank: &mut ExpertBank,
    on_epoch: &mut dyn FnMut(&EpochLog, &ParamStore) -> Result<()>,
) -> Result<TrainReport> {
    bank.validate()?;
    let mut factors = bank.factors.clone();
    let result = {
        let objective = LoraObjective {
            cfg,
            tcfg,
            base,
            bank: &*bank,
        };
        fit(&mut factors, records, tcfg, &objective, on_epoch)
    };
    bank.factors = factors;
    result
}

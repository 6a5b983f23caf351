use std::collections::HashMap;

use indexmap::IndexMap;

use super::config::ModelConfig;
use super::params::{attn_site, ParamStore};
use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::linear_ode::{segment_index, token_boundaries, LinearSegment, PiecewiseFlow};
use crate::tape::{Graph, Var};
use crate::tensor::Mat;

/// Parameters placed on a graph, either as trainable leaves or as constants.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn trainable(g: &mut Graph, store: &ParamStore) -> Self {
        Bound {
            vars: store.iter().map(|(k, m)| (k.to_owned(), g.param(m.clone()))).collect(),
        }
    }

    pub fn frozen(g: &mut Graph, store: &ParamStore) -> Self {
        Bound {
            vars: store.iter().map(|(k, m)| (k.to_owned(), g.constant(m.clone()))).collect(),
        }
    }

    /// `store` as constants, except names already bound in `top`.
    pub fn overlay(g: &mut Graph, store: &ParamStore, top: &Bound) -> Self {
        Bound {
            vars: store
                .iter()
                .map(|(k, m)| (k.to_owned(), top.vars.get(k).copied().unwrap_or_else(|| g.constant(m.clone()))))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Supplies per-record additive weight deltas for attention projections.
pub trait Adapter: Sync {
    /// `summary` holds one encoder state per channel (`d_x × d_h`). Returns
    /// `(site name, ΔW)` pairs with ΔW shaped like the site weight.
    fn site_deltas(&self, g: &mut Graph, summary: Var) -> Result<Vec<(String, Var)>>;
}

/// How the initial latent state is formed from `(μ, log σ)`.
#[derive(Debug, Clone, Copy)]
pub enum Latent<'a> {
    Mean,
    /// Reparameterized draw with the given standard-normal noise (`d_x × d_z`).
    Sample(&'a Mat),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub summary: Var,
    pub tokens: Var,
    pub final_tokens: Var,
    pub head: Var,
    pub mu: Var,
    pub log_std: Var,
    pub z0: Var,
    pub load_balance: Var,
    /// Attention probabilities per block, then per head.
    pub attention: Vec<Vec<Var>>,
    /// `d_x × n_queries` normalized predictions.
    pub prediction: Var,
}

pub struct BackboneOutput {
    pub tokens: Var,
    pub load_balance: Var,
    pub attention: Vec<Vec<Var>>,
}

fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = g.matmul_nt(x, w);
    Ok(g.add_row(y, b))
}

fn mlp(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.silu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

fn check_record(cfg: &ModelConfig, rec: &Record) -> Result<()> {
    if rec.n_channels() == 0 || rec.n_channels() > cfg.max_channels {
        return Err(Error::InvalidArgument(format!(
            "record has {} channels, model supports 1..={}",
            rec.n_channels(),
            cfg.max_channels
        )));
    }
    if rec.split.n_observed == 0 {
        return Err(Error::InsufficientPrefix {
            observed: 0,
            required: 1,
        });
    }
    let finite = rec.observed_dt().iter().all(|v| v.is_finite())
        && (0..rec.n_channels()).all(|j| rec.observed(j).iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFinite {
            context: format!("observed prefix of {}", rec.id()),
        });
    }
    Ok(())
}

/// Runs the gated recurrent encoder over each channel's observed prefix,
/// feeding `[value, Δt]` per step from a zero state. Returns `d_x × d_h`.
pub fn encode_prefix(g: &mut Graph, p: &Bound, cfg: &ModelConfig, rec: &Record) -> Result<Var> {
    check_record(cfg, rec)?;
    let dx = rec.n_channels();
    let w = |gate: &str, part: &str| p.get(&format!("encoder.gru.{gate}.{part}"));
    let (wz, uz, bz) = (w("z", "w_in")?, w("z", "w_rec")?, w("z", "bias")?);
    let (wr, ur, br) = (w("r", "w_in")?, w("r", "w_rec")?, w("r", "bias")?);
    let (wn, un, bn) = (w("n", "w_in")?, w("n", "w_rec")?, w("n", "bias")?);
    let mut h = g.constant(Mat::zeros(dx, cfg.d_h));
    let dt = rec.observed_dt();
    for (i, &step) in dt.iter().enumerate() {
        let mut xi = Mat::zeros(dx, 2);
        for j in 0..dx {
            xi[(j, 0)] = rec.values[j][i];
            xi[(j, 1)] = step;
        }
        let x = g.constant(xi);
        let gate = |g: &mut Graph, w_in: Var, rec_in: Var, u: Var, b: Var| {
            let a = g.matmul_nt(x, w_in);
            let c = g.matmul_nt(rec_in, u);
            let s = g.add(a, c);
            g.add_row(s, b)
        };
        let z = gate(g, wz, h, uz, bz);
        let z = g.sigmoid(z);
        let r = gate(g, wr, h, ur, br);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let n = gate(g, wn, rh, un, bn);
        let n = g.tanh(n);
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        h = g.add(n, zd);
    }
    Ok(h)
}

/// Gaussian bumps at `n` equispaced centers on `[0, 1]` with width equal to
/// the center spacing. The flag reports whether `t` had to be clamped.
pub fn rbf_time_features(t: f64, n: usize) -> (Vec<f64>, bool) {
    let tc = t.clamp(0.0, 1.0);
    let clamped = tc != t || t.is_nan();
    let tc = if t.is_nan() { 0.0 } else { tc };
    let sigma = 1.0 / (n - 1) as f64;
    let feats = (0..n)
        .map(|i| {
            let d = tc - i as f64 * sigma;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    (feats, clamped)
}

/// Builds the `(d_x·K) × d_model` token grid, rows ordered channel-major.
pub fn tokenize_embed(g: &mut Graph, p: &Bound, cfg: &ModelConfig, summary: Var) -> Result<Var> {
    let dx = g.value(summary).rows();
    if dx > cfg.max_channels {
        return Err(Error::InvalidArgument(format!(
            "channel index {} exceeds max_channels {}",
            dx - 1,
            cfg.max_channels
        )));
    }
    let k_token = cfg.k_token;
    let bounds = token_boundaries(k_token);
    let mut rbf = Mat::zeros(k_token, cfg.n_rbf_centers);
    for k in 0..k_token {
        let (f, _) = rbf_time_features(bounds[k], cfg.n_rbf_centers);
        rbf.row_mut(k).copy_from_slice(&f);
    }
    let rbf = g.constant(rbf);
    let rbf = g.layer_norm(rbf, cfg.ln_eps);
    let mod_out = mlp(g, p, "embed.time", rbf)?;
    let gamma_raw = g.slice_cols(mod_out, 0, cfg.d_model);
    let gamma = g.add_scalar(gamma_raw, 1.0);
    let beta = g.slice_cols(mod_out, cfg.d_model, cfg.d_model);

    let value = mlp(g, p, "embed.value", summary)?;
    let chan_idx: Vec<usize> = (0..dx).flat_map(|j| std::iter::repeat_n(j, k_token)).collect();
    let tok_idx: Vec<usize> = (0..dx).flat_map(|_| 0..k_token).collect();
    let v_rep = g.select_rows(value, &chan_idx);
    let g_rep = g.select_rows(gamma, &tok_idx);
    let b_rep = g.select_rows(beta, &tok_idx);
    let codes = p.get("embed.channel_codes")?;
    let c_rep = g.select_rows(codes, &chan_idx);
    let scaled = g.mul(v_rep, g_rep);
    let shifted = g.add(scaled, b_rep);
    Ok(g.add(shifted, c_rep))
}

fn site_weight(g: &mut Graph, p: &Bound, deltas: &HashMap<String, Var>, name: &str) -> Result<Var> {
    let w = p.get(name)?;
    Ok(match deltas.get(name) {
        Some(&d) => g.add(w, d),
        None => w,
    })
}

/// Top-`k` membership per row, ties resolved towards the lower expert index.
fn top_k_mask(probs: &Mat, k: usize) -> Mat {
    let mut mask = Mat::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &e in &order[..k] {
            mask[(r, e)] = 1.0;
        }
    }
    mask
}

fn attention(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    l: usize,
    x: Var,
    deltas: &HashMap<String, Var>,
) -> Result<(Var, Vec<Var>)> {
    let xn = g.layer_norm(x, cfg.ln_eps);
    let wq = site_weight(g, p, deltas, &attn_site(l, 'q'))?;
    let wk = site_weight(g, p, deltas, &attn_site(l, 'k'))?;
    let wv = site_weight(g, p, deltas, &attn_site(l, 'v'))?;
    let wo = site_weight(g, p, deltas, &attn_site(l, 'o'))?;
    let q = g.matmul_nt(xn, wq);
    let k = g.matmul_nt(xn, wk);
    let v = g.matmul_nt(xn, wv);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s);
        probs.push(a);
        heads.push(g.matmul(a, vh));
    }
    let cat = g.concat_cols(&heads);
    let out = g.matmul_nt(cat, wo);
    Ok((g.add(x, out), probs))
}

fn mixture_of_experts(g: &mut Graph, p: &Bound, cfg: &ModelConfig, l: usize, x: Var) -> Result<(Var, Var)> {
    let n = g.value(x).rows();
    let e_count = cfg.n_moe_experts;
    let xn = g.layer_norm(x, cfg.ln_eps);
    let gate_w = p.get(&format!("blocks.{l}.moe.gate.weight"))?;
    let logits = g.matmul_nt(xn, gate_w);
    let probs = g.softmax_rows(logits);
    let mask = top_k_mask(g.value(probs), cfg.moe_top_k);
    let routes: Vec<Vec<usize>> = (0..e_count)
        .map(|e| (0..n).filter(|&r| mask[(r, e)] == 1.0).collect())
        .collect();
    let mask = g.constant(mask);
    let kept = g.mul(probs, mask);
    let ones = g.constant(Mat::filled(e_count, 1, 1.0));
    let total = g.matmul(kept, ones);
    let inv = g.recip(total);
    let weights = g.mul_col(kept, inv);

    let mut acc = x;
    for (e, rows) in routes.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xe = g.select_rows(xn, rows);
        let ye = mlp(g, p, &format!("blocks.{l}.moe.expert.{e}"), xe)?;
        let we = g.block(weights, 0, e, n, 1);
        let we = g.select_rows(we, rows);
        let ye = g.mul_col(ye, we);
        let full = g.scatter_rows(ye, rows, n);
        acc = g.add(acc, full);
    }

    let usage = g.mean_rows(probs);
    let centred = g.add_scalar(usage, -1.0 / e_count as f64);
    let sq = g.square(centred);
    let lb = g.sum(sq);
    let lb = g.scale(lb, e_count as f64);
    Ok((acc, lb))
}

/// Hub-augmented pre-norm transformer. The hub rows join every attention
/// layer and are removed from the returned grid.
pub fn backbone_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    tokens: Var,
    deltas: &HashMap<String, Var>,
) -> Result<BackboneOutput> {
    let n_tok = g.value(tokens).rows();
    let mut x = if cfg.n_csh_tokens > 0 {
        let hub = p.get("csh.tokens")?;
        g.concat_rows(&[tokens, hub])
    } else {
        tokens
    };
    let mut lb_terms = Vec::with_capacity(cfg.n_blocks);
    let mut attn = Vec::with_capacity(cfg.n_blocks);
    for l in 0..cfg.n_blocks {
        let (y, probs) = attention(g, p, cfg, l, x, deltas)?;
        let (y, lb) = mixture_of_experts(g, p, cfg, l, y)?;
        if !g.value(y).is_finite() {
            return Err(Error::NonFinite {
                context: format!("backbone block {l}"),
            });
        }
        x = y;
        lb_terms.push(lb);
        attn.push(probs);
    }
    let load_balance = match lb_terms.len() {
        0 => g.constant(Mat::zeros(1, 1)),
        n => {
            let cat = g.concat_cols(&lb_terms);
            let s = g.sum(cat);
            g.scale(s, 1.0 / n as f64)
        }
    };
    let tokens = if cfg.n_csh_tokens > 0 {
        g.block(x, 0, 0, n_tok, cfg.d_model)
    } else {
        x
    };
    Ok(BackboneOutput {
        tokens,
        load_balance,
        attention: attn,
    })
}

/// Maps each final token to `d_z² + d_z` numbers: row-major `A` then `b`.
/// Tokens are layer-normalized on entry.
pub fn param_head(g: &mut Graph, p: &Bound, cfg: &ModelConfig, final_tokens: Var) -> Result<Var> {
    let x = g.layer_norm(final_tokens, cfg.ln_eps);
    mlp(g, p, "head", x)
}

fn clamp_scale(fro: f64) -> f64 {
    if fro == 0.0 {
        1.0
    } else {
        fro.tanh() / fro
    }
}

const CLAMP_FLOOR: f64 = 1e-24;

fn split_head_row(g: &mut Graph, cfg: &ModelConfig, head: Var, row: usize) -> (Var, Var) {
    let dz = cfg.d_z;
    let a = g.block(head, row, 0, 1, dz * dz);
    let mut a = g.reshape(a, dz, dz);
    if cfg.stability_clamp {
        let sq = g.square(a);
        let s = g.sum(sq);
        let s = g.add_scalar(s, CLAMP_FLOOR);
        let s = g.sqrt(s);
        let t = g.tanh(s);
        let inv = g.recip(s);
        let factor = g.mul(t, inv);
        a = g.scale_by(a, factor, 0);
    }
    let b = g.block(head, row, dz * dz, 1, dz);
    let b = g.reshape(b, dz, 1);
    (a, b)
}

/// Integrates every channel's token-wise affine flow in the graph and reads
/// out `W_dec z + b_dec` at the query times.
pub fn decode(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    head: Var,
    z0: Var,
    queries: &[f64],
) -> Result<Var> {
    check_queries(queries)?;
    let dx = g.value(z0).rows();
    let dz = cfg.d_z;
    let k_token = cfg.k_token;
    let bounds = token_boundaries(k_token);
    let seg_of: Vec<usize> = queries.iter().map(|&t| segment_index(&bounds, t)).collect();
    let k_max = seg_of.last().copied().unwrap_or(0);
    let zero_row = g.constant(Mat::zeros(1, dz + 1));
    let one = g.constant(Mat::filled(1, 1, 1.0));
    let w_dec = p.get("decoder.weight")?;
    let zero = g.constant(Mat::zeros(1, 1));
    let w_pad = g.concat_cols(&[w_dec, zero]);

    let mut rows = Vec::with_capacity(dx);
    for j in 0..dx {
        let zj = g.block(z0, j, 0, 1, dz);
        let zj = g.transpose(zj);
        let mut knot = g.concat_rows(&[zj, one]);
        let mut gens = Vec::with_capacity(k_max + 1);
        let mut knots = Vec::with_capacity(k_max + 1);
        for k in 0..=k_max {
            let (a, b) = split_head_row(g, cfg, head, j * k_token + k);
            let top = g.concat_cols(&[a, b]);
            let aug = g.concat_rows(&[top, zero_row]);
            knots.push(knot);
            if k < k_max {
                let step = g.scale(aug, bounds[k + 1] - bounds[k]);
                let e = g.expm(step)?;
                knot = g.matmul(e, knot);
            }
            gens.push(aug);
        }
        let mut states = Vec::with_capacity(queries.len());
        for (&t, &k) in queries.iter().zip(&seg_of) {
            let tau = t - bounds[k];
            states.push(if tau == 0.0 {
                knots[k]
            } else {
                let step = g.scale(gens[k], tau);
                let e = g.expm(step)?;
                g.matmul(e, knots[k])
            });
        }
        if states.is_empty() {
            rows.push(g.constant(Mat::zeros(1, 0)));
            continue;
        }
        let cols = g.concat_cols(&states);
        rows.push(g.matmul(w_pad, cols));
    }
    let out = g.concat_rows(&rows);
    if queries.is_empty() {
        return Ok(out);
    }
    let ones_col = g.constant(Mat::filled(dx, 1, 1.0));
    let ones_row = g.constant(Mat::filled(1, queries.len(), 1.0));
    let b_dec = p.get("decoder.bias")?;
    let bias = g.matmul(ones_col, b_dec);
    let bias = g.matmul(bias, ones_row);
    Ok(g.add(out, bias))
}

fn check_queries(queries: &[f64]) -> Result<()> {
    if queries.windows(2).any(|w| !(w[0] <= w[1])) || queries.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::UnsortedQueries);
    }
    Ok(())
}

/// Full encode, embed, backbone, head and decode pass for one record.
pub fn forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    rec: &Record,
    queries: &[f64],
    latent: Latent<'_>,
    adapter: Option<&dyn Adapter>,
) -> Result<ForwardOutput> {
    let summary = encode_prefix(g, p, cfg, rec).map_err(|e| e.staged("encode"))?;
    let mut deltas = HashMap::new();
    if let Some(ad) = adapter {
        for (site, d) in ad.site_deltas(g, summary).map_err(|e| e.staged("adapt"))? {
            let w = p.get(&site).map_err(|_| Error::UnknownSite(site.clone()).staged("adapt"))?;
            if g.value(w).shape() != g.value(d).shape() {
                return Err(Error::shape("adapter delta", format!("site {site}")).staged("adapt"));
            }
            deltas.insert(site, d);
        }
    }
    let tokens = tokenize_embed(g, p, cfg, summary).map_err(|e| e.staged("embed"))?;
    let bb = backbone_forward(g, p, cfg, tokens, &deltas).map_err(|e| e.staged("backbone"))?;
    let head = param_head(g, p, cfg, bb.tokens).map_err(|e| e.staged("head"))?;

    let mu = linear(g, p, "latent.mu", summary)?;
    let log_std = linear(g, p, "latent.log_std", summary)?;
    let z0 = match latent {
        Latent::Mean => mu,
        Latent::Sample(eps) => {
            let dims = (rec.n_channels(), cfg.d_z);
            if eps.shape() != dims {
                return Err(Error::shape("latent noise", format!("expected {dims:?}, got {:?}", eps.shape())));
            }
            let eps = g.constant(eps.clone());
            let std = g.exp(log_std);
            let noise = g.mul(std, eps);
            g.add(mu, noise)
        }
    };
    let prediction = decode(g, p, cfg, head, z0, queries).map_err(|e| e.staged("decode"))?;
    Ok(ForwardOutput {
        summary,
        tokens,
        final_tokens: bb.tokens,
        head,
        mu,
        log_std,
        z0,
        load_balance: bb.load_balance,
        attention: bb.attention,
        prediction,
    })
}

/// Channel summaries of the observed prefix (`d_x × d_h`).
pub fn summarize(params: &ParamStore, cfg: &ModelConfig, rec: &Record) -> Result<Mat> {
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params);
    let h = encode_prefix(&mut g, &p, cfg, rec).map_err(|e| e.staged("encode"))?;
    Ok(g.value(h).clone())
}

/// Inference-mode predictions (latent mean) per channel at `queries`.
pub fn predict_trajectory(
    params: &ParamStore,
    cfg: &ModelConfig,
    rec: &Record,
    queries: &[f64],
    adapter: Option<&dyn Adapter>,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let p = Bound::frozen(&mut g, params);
    let out = forward(&mut g, &p, cfg, rec, queries, Latent::Mean, adapter)?;
    let m = g.value(out.prediction);
    Ok((0..m.rows()).map(|r| m.row(r).to_vec()).collect())
}

/// Rebuilds per-channel flows from head outputs and initial states, applying
/// the same clamp as the graph decoder.
pub fn flows_from_head(cfg: &ModelConfig, head: &Mat, z0: &Mat) -> Result<Vec<PiecewiseFlow>> {
    let dz = cfg.d_z;
    let k_token = cfg.k_token;
    if head.cols() != cfg.head_width() || head.rows() != z0.rows() * k_token || z0.cols() != dz {
        return Err(Error::shape("flows_from_head", "head and latent shapes disagree"));
    }
    let bounds = token_boundaries(k_token);
    (0..z0.rows())
        .map(|j| {
            let segments = (0..k_token)
                .map(|k| {
                    let row = head.row(j * k_token + k);
                    let mut a = Mat::from_vec(dz, dz, row[..dz * dz].to_vec())?;
                    if cfg.stability_clamp {
                        let s = (a.as_slice().iter().map(|v| v * v).sum::<f64>() + CLAMP_FLOOR).sqrt();
                        a = a.scale(clamp_scale(s));
                    }
                    LinearSegment::new(a, row[dz * dz..].to_vec(), bounds[k], bounds[k + 1])
                })
                .collect::<Result<Vec<_>>>()?;
            PiecewiseFlow::new(segments, z0.row(j).to_vec())
        })
        .collect()
}

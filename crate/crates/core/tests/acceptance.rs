//! Acceptance suite. Runs criteria 1-10 in order and prints one line each.
//! Pass criterion numbers as arguments to run a subset.
//!
//! A criterion listed in `KNOWN_UNMET` is still run and still reported as
//! FAIL; it just does not fail the process. Anything else that fails does.

use std::collections::BTreeMap;
use std::time::Instant;

use lasslab_core::bench::{flop_estimate, inference_latency, time_integration, CostModel, Method};
use lasslab_core::checkpoint::Dtype;
use lasslab_core::corpus::{build_corpus, CorpusSpec};
use lasslab_core::dataset::{
    normalize_record, read_dataset, write_dataset, NormalizationSpec, PrefixSplit, Record, SplitTag,
};
use lasslab_core::eval::{eval_metrics, Horizon, Prediction};
use lasslab_core::linear_ode::augmented_expm;
use lasslab_core::lora::{
    attention_sites, extract_feature, finetune, fit_kmeans, route, unit_feature, weights_from_scores, ExpertBank,
    LoraConfig, LoraObjective, MixtureAdapter,
};
use lasslab_core::model::{init_params, load_checkpoint, predict_trajectory, save_checkpoint, Adapter, Bound, Latent};
use lasslab_core::sim::{
    default_emt_system, default_swing_system, make_scenario_batch, simulate_emt, simulate_erl, simulate_swing,
    AcSource, EmtInit, ErlSystem, EventSchedule, Family, ScenarioMeta, Sweep,
};
use lasslab_core::tape::{AdjointFault, Graph};
use lasslab_core::training::{grad_check, loss_graph, sample_coordinates, standard_normal, train, Target, TrainConfig};
use lasslab_core::{Mat, ModelConfig, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail; reasons are in the project notes.
const KNOWN_UNMET: &[u32] = &[3];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(checks: &[(bool, String)]) -> Verdict {
    Verdict {
        pass: checks.iter().all(|c| c.0),
        detail: checks
            .iter()
            .map(|(ok, s)| format!("{}{s}", if *ok { "" } else { "[x] " }))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    standard_normal(rng, rows, cols)
}

/// Sinusoidal record on a uniform grid with identity normalization.
fn sine_record(n_channels: usize, n_samples: usize, seed: u64) -> Record {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (0..n_samples).map(|i| i as f64 / (n_samples - 1) as f64).collect();
    let values = (0..n_channels)
        .map(|_| {
            let (a, w, ph): (f64, f64, f64) =
                (rng.random_range(0.3..0.9), rng.random_range(1.0..6.0), rng.random_range(0.0..6.0));
            times.iter().map(|&t| a * (w * t + ph).sin()).collect()
        })
        .collect();
    let gap = times[1];
    let n_observed = (0.3 * n_samples as f64) as usize;
    Record {
        channels: (0..n_channels).map(|j| format!("c{j}")).collect(),
        dt: (0..n_samples).map(|i| if i == 0 { gap } else { times[i] - times[i - 1] }).collect(),
        values,
        norm: NormalizationSpec {
            scale: vec![1.0; n_channels],
            offset: vec![0.0; n_channels],
            t_max: 1.0,
        },
        split: PrefixSplit {
            prefix_ratio: 0.3,
            t_obs: times[n_observed - 1],
            n_observed,
        },
        times,
        meta: ScenarioMeta::new(Family::Swing, 0.1, seed),
        tag: SplitTag::Pretrain,
    }
}

/// Initial parameters with every entry jittered, so the head is live and
/// every path carries gradient.
fn jittered_params(cfg: &ModelConfig, seed: u64, std: f64) -> ParamStore {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, m) in p.iter_mut() {
        for v in m.as_mut_slice() {
            *v += rng.random_range(-std..std);
        }
    }
    p
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let mut m = random_mat(rng, rows, cols);
    for r in 0..rows {
        let n = norm(m.row(r));
        m.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    m
}

fn bank(cfg: &ModelConfig, lc: LoraConfig, seed: u64) -> ExpertBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = unit_rows(&mut rng, lc.n_clusters, cfg.d_h);
    ExpertBank::new(lc, centroids, attention_sites(cfg), seed).unwrap()
}

fn randomize_v(bank: &mut ExpertBank, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in 0..bank.n_experts() {
        for s in bank.sites.clone() {
            for x in bank.factors.get_mut(&ExpertBank::v_name(m, &s.name)).unwrap().as_mut_slice() {
                *x = rng.random_range(-std..std);
            }
        }
    }
}

/// Classical RK4 on `z' = A z + b` with `n` equal steps over `delta`.
fn rk4_affine(a: &Mat, b: &[f64], z0: &[f64], delta: f64, n: usize) -> Vec<f64> {
    let d = z0.len();
    let h = delta / n as f64;
    let f = |z: &[f64], out: &mut [f64]| {
        for i in 0..d {
            out[i] = a.row(i).iter().zip(z).map(|(x, y)| x * y).sum::<f64>() + b[i];
        }
    };
    let mut z = z0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for _ in 0..n {
        f(&z, &mut k1);
        (0..d).for_each(|i| tmp[i] = z[i] + 0.5 * h * k1[i]);
        f(&tmp, &mut k2);
        (0..d).for_each(|i| tmp[i] = z[i] + 0.5 * h * k2[i]);
        f(&tmp, &mut k3);
        (0..d).for_each(|i| tmp[i] = z[i] + h * k3[i]);
        f(&tmp, &mut k4);
        (0..d).for_each(|i| z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    z
}

fn criterion_1() -> Verdict {
    const CASES: usize = 1000;
    const SUB_STEP: f64 = 1e-5;
    const ORACLE_TOL: f64 = 1e-8;
    const SEMIGROUP_TOL: f64 = 1e-10;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_oracle, mut worst_semigroup) = (0.0f64, 0.0f64);
    for _ in 0..CASES {
        let d = rng.random_range(1..=8);
        let raw = random_mat(&mut rng, d, d);
        // Frobenius norm bounds the spectral radius.
        let radius = rng.random_range(0.0..5.0);
        let a = raw.scale(radius / raw.norm_fro().max(1e-300));
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let delta = rng.random_range(0.01..1.0);
        let closed = augmented_expm(&a, &b, delta).unwrap().apply(&z0);
        let oracle = rk4_affine(&a, &b, &z0, delta, (delta / SUB_STEP).ceil() as usize);
        let err: Vec<f64> = closed.iter().zip(&oracle).map(|(x, y)| x - y).collect();
        worst_oracle = worst_oracle.max(norm(&err) / norm(&oracle).max(1e-300));

        let split = rng.random_range(0.0..1.0) * delta;
        let first = augmented_expm(&a, &b, split).unwrap().apply(&z0);
        let composed = augmented_expm(&a, &b, delta - split).unwrap().apply(&first);
        let gap: Vec<f64> = composed.iter().zip(&closed).map(|(x, y)| x - y).collect();
        worst_semigroup = worst_semigroup.max(norm(&gap) / norm(&closed).max(1.0));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(&[
        (worst_oracle < ORACLE_TOL, format!("max rel err vs RK4 {worst_oracle:.2e} (< {ORACLE_TOL:e})")),
        (worst_semigroup < SEMIGROUP_TOL, format!("semigroup {worst_semigroup:.2e} (< {SEMIGROUP_TOL:e})")),
        (secs < 60.0, format!("{secs:.1}s (< 60s)")),
    ])
}

fn criterion_2() -> Verdict {
    const COORDS: usize = 200;
    const REL_TOL: f64 = 1e-4;
    const FRACTION: f64 = 0.99;
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let tcfg = TrainConfig::default();
    let base = jittered_params(&cfg, 21, 0.15);
    let mut b = bank(&cfg, LoraConfig::default(), 22);
    randomize_v(&mut b, 23, 0.1);
    let objective = LoraObjective {
        cfg: &cfg,
        tcfg: &tcfg,
        base: &base,
        bank: &b,
    };
    let mut joint = base.clone();
    for (name, m) in b.factors.iter() {
        joint.insert(name, m.clone());
    }
    let rec = sine_record(2, 25, 24);
    let noise = standard_normal(&mut ChaCha8Rng::seed_from_u64(25), 2, cfg.d_z);
    let coords = sample_coordinates(&joint, COORDS, 26);
    let report = grad_check(&objective, &joint, &rec, &noise, &coords, 1e-5, None).unwrap();
    let touched = report.tensors(&joint);
    let covers = |pat: &str| touched.iter().any(|n| n.contains(pat));
    let paths = ["encoder.gru.", ".attn.", ".moe.gate.", "expert.0."];
    let missing: Vec<&str> = paths.iter().copied().filter(|p| !covers(p)).collect();
    let broken = grad_check(&objective, &joint, &rec, &noise, &coords, 1e-5, Some(AdjointFault::NegateExpm)).unwrap();
    let frac = report.fraction_below(REL_TOL);
    let secs = start.elapsed().as_secs_f64();
    verdict(&[
        (
            frac >= FRACTION && coords.len() == COORDS,
            format!("{:.1}% of {COORDS} coords below {REL_TOL:e} (>= 99%), max {:.2e}", 100.0 * frac, report.max_rel_error),
        ),
        (missing.is_empty(), format!("paths gru/attn/moe-gate/lora covered (missing {missing:?})")),
        (
            broken.fraction_below(REL_TOL) < 0.9,
            format!("negated expm adjoint caught ({:.1}% pass)", 100.0 * broken.fraction_below(REL_TOL)),
        ),
        (secs < 300.0, format!("{secs:.1}s (< 300s)")),
    ])
}

fn full_horizon_mse(params: &ParamStore, cfg: &ModelConfig, recs: &[Record], adapter: Option<&dyn Adapter>, h: Horizon) -> f64 {
    let preds: Vec<Prediction> = recs
        .iter()
        .map(|r| Prediction {
            id: r.id().to_owned(),
            times: r.times.clone(),
            values: predict_trajectory(params, cfg, r, &r.times, adapter).unwrap(),
        })
        .collect();
    let report = eval_metrics(&preds, recs, h).unwrap();
    report.records.iter().map(|r| r.mse).sum::<f64>() / report.records.len() as f64
}

fn criterion_3() -> Verdict {
    const RATIO: f64 = 100.0;
    const MSE: f64 = 1e-3;
    let start = Instant::now();
    let sweep = Sweep::default_for(Family::Swing);
    let batch = make_scenario_batch(Family::Swing, &sweep, &[0]).unwrap();
    let recs: Vec<Record> = batch.trajectories.iter().map(|t| normalize_record(t, 0.5).unwrap()).collect();
    let cfg = ModelConfig::default();
    let tcfg = TrainConfig {
        batch_size: 2,
        epochs: 200,
        ..TrainConfig::default()
    };
    let mut params = init_params(&cfg, 0).unwrap();
    let report = train(&recs, &mut params, &cfg, &tcfg, None).unwrap();
    let ratio = report.first_total().unwrap() / report.last_total().unwrap();
    let mse = full_horizon_mse(&params, &cfg, &recs, None, Horizon::Full);
    let secs = start.elapsed().as_secs_f64();
    verdict(&[
        (recs.len() == 8, format!("{} swing records", recs.len())),
        (ratio >= RATIO, format!("total loss epoch 1 / epoch 200 = {ratio:.1} (>= {RATIO})")),
        (mse < MSE, format!("full-horizon normalized MSE {mse:.3e} (< {MSE:e})")),
        (secs < 600.0, format!("{secs:.1}s (< 600s)")),
    ])
}

fn criterion_4() -> Verdict {
    const SIMPLEX_TOL: f64 = 1e-9;
    let cfg = ModelConfig::tiny();
    let p = jittered_params(&cfg, 3, 0.1);
    let recs: Vec<Record> = (0..4).map(|i| sine_record(1 + i as usize, 40, 30 + i)).collect();

    let zero = bank(&cfg, LoraConfig::default(), 4);
    let zero_adapter = MixtureAdapter::new(&zero);
    let bitwise = recs.iter().all(|r| {
        predict_trajectory(&p, &cfg, r, &r.times, None).unwrap()
            == predict_trajectory(&p, &cfg, r, &r.times, Some(&zero_adapter)).unwrap()
    });

    let mut single = bank(&cfg, LoraConfig { n_clusters: 1, ..LoraConfig::default() }, 5);
    randomize_v(&mut single, 6, 0.05);
    let mut merged = p.clone();
    for s in &single.sites {
        let u = single.factors.get(&ExpertBank::u_name(0, &s.name)).unwrap();
        let v = single.factors.get(&ExpertBank::v_name(0, &s.name)).unwrap();
        let delta = v.matmul(u).scale(single.config.alpha / single.config.rank as f64);
        let w = merged.get_mut(&s.name).unwrap();
        *w = w.add(&delta);
    }
    let single_adapter = MixtureAdapter::new(&single);
    let plain_lora = recs.iter().all(|r| {
        predict_trajectory(&p, &cfg, r, &r.times, Some(&single_adapter)).unwrap()
            == predict_trajectory(&merged, &cfg, r, &r.times, None).unwrap()
    });

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_sum = 0.0f64;
    let mut negative = 0usize;
    for i in 0..10_000u64 {
        let k = rng.random_range(1..=8);
        let tau = 10f64.powf(rng.random_range(-3.0..1.0));
        let weights = if i % 2 == 0 {
            let scores = (0..k).map(|_| rng.random_range(-50.0..50.0)).collect();
            weights_from_scores(scores, tau).weights
        } else {
            let lc = LoraConfig { n_clusters: k, temperature: tau, ..LoraConfig::default() };
            let b = ExpertBank::new(lc, unit_rows(&mut rng, k, cfg.d_h), attention_sites(&cfg), i).unwrap();
            let raw: Vec<f64> = (0..cfg.d_h).map(|_| rng.random_range(-1.0..1.0)).collect();
            route(&unit_feature(raw).unwrap(), &b).unwrap().weights
        };
        negative += weights.iter().filter(|w| !(**w >= 0.0)).count();
        worst_sum = worst_sum.max((weights.iter().sum::<f64>() - 1.0).abs());
    }

    let tcfg = TrainConfig::default();
    let mut live = bank(&cfg, LoraConfig::default(), 8);
    randomize_v(&mut live, 9, 0.1);
    let mut g = Graph::new();
    let factors = Bound::trainable(&mut g, &live.factors);
    let base = Bound::overlay(&mut g, &p, &factors);
    let target = Target::full_horizon(&recs[1]).unwrap();
    let adapter = MixtureAdapter::bound(&live, &factors);
    let lv = loss_graph(&mut g, &base, &cfg, &tcfg, &recs[1], &target, Latent::Mean, Some(&adapter)).unwrap();
    let grads = g.backward(lv.total);
    let frozen = base.iter().all(|(_, v)| !g.requires_grad(v) && grads.get(v).max_abs() == 0.0);
    let factors_move = factors.iter().all(|(_, v)| grads.get(v).max_abs() > 0.0);

    verdict(&[
        (bitwise, "zero bank bitwise equal to base".into()),
        (plain_lora, "K=1 equals merged plain LoRA exactly".into()),
        (
            negative == 0 && worst_sum <= SIMPLEX_TOL,
            format!("10^4 routings on simplex (max |sum-1| {worst_sum:.1e}, {negative} negative)"),
        ),
        (frozen && factors_move, "base gradient identically zero, factors receive gradient".into()),
    ])
}

fn criterion_5() -> Verdict {
    let mut violations = 0usize;
    let mut worst_rise = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(20..80);
        let d = rng.random_range(2..12);
        let k = rng.random_range(2..6);
        let f = unit_rows(&mut rng, n, d);
        let fit = fit_kmeans(&f, k, seed, 100, 1).unwrap();
        for w in fit.objective_trace.windows(2) {
            if w[1] > w[0] {
                violations += 1;
                worst_rise = worst_rise.max(w[1] - w[0]);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let d = 16;
    let dirs = loop {
        let m = unit_rows(&mut rng, 2, d);
        if m.row(0).iter().zip(m.row(1)).map(|(a, b)| a * b).sum::<f64>() < 0.3 {
            break m;
        }
    };
    let mut rows = Vec::new();
    let mut planted = Vec::new();
    for i in 0..60 {
        let c = i % 2;
        let v: Vec<f64> = dirs.row(c).iter().map(|x| x + rng.random_range(-0.05..0.05)).collect();
        let n = norm(&v);
        rows.push(v.iter().map(|x| x / n).collect::<Vec<_>>());
        planted.push(c);
    }
    let fit = fit_kmeans(&Mat::from_rows(&rows).unwrap(), 2, 0, 100, 5).unwrap();
    let flip = fit.assignments[0] != planted[0];
    let correct = fit
        .assignments
        .iter()
        .zip(&planted)
        .filter(|(a, p)| (if flip { 1 - **a } else { **a }) == **p)
        .count();
    verdict(&[
        (violations == 0, format!("Lloyd objective non-increasing over 100 runs ({violations} rises, max {worst_rise:.1e})")),
        (correct == planted.len(), format!("planted two-bundle accuracy {}/{}", correct, planted.len())),
    ])
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let spec = CorpusSpec::standard(8);
    let recs = build_corpus(&spec, 0).unwrap();
    let tagged = |tag| recs.iter().filter(|r| r.tag == tag).cloned().collect::<Vec<_>>();
    let (pre, ft, test, zero) =
        (tagged(SplitTag::Pretrain), tagged(SplitTag::Finetune), tagged(SplitTag::Test), tagged(SplitTag::ZeroShot));
    let cfg = ModelConfig::default();
    let mut params = init_params(&cfg, 1).unwrap();
    let pre_cfg = TrainConfig { epochs: 50, batch_size: 4, seed: 2, ..TrainConfig::default() };
    train(&pre, &mut params, &cfg, &pre_cfg, None).unwrap();

    let lc = LoraConfig::default();
    let feats: Vec<Vec<f64>> = ft.iter().map(|r| extract_feature(&params, &cfg, r).unwrap()).collect();
    let fit = fit_kmeans(&Mat::from_rows(&feats).unwrap(), lc.n_clusters, 3, lc.max_iter, lc.restarts).unwrap();
    let mut b = ExpertBank::new(lc, fit.centroids, attention_sites(&cfg), 4).unwrap();
    let ft_cfg = TrainConfig { epochs: 30, batch_size: 4, seed: 5, ..TrainConfig::default() };
    finetune(&ft, &params, &cfg, &ft_cfg, &mut b, &mut |_, _| Ok(())).unwrap();
    let adapter = MixtureAdapter::new(&b);

    let base_test = full_horizon_mse(&params, &cfg, &test, None, Horizon::Future);
    let adapted_test = full_horizon_mse(&params, &cfg, &test, Some(&adapter), Horizon::Future);
    let base_zero = full_horizon_mse(&params, &cfg, &zero, None, Horizon::Future);
    let adapted_zero = full_horizon_mse(&params, &cfg, &zero, Some(&adapter), Horizon::Future);
    let secs = start.elapsed().as_secs_f64();
    verdict(&[
        (
            adapted_test < base_test,
            format!("fine-tuned split MSE x1e-2: adapted {:.3} < base {:.3}", adapted_test * 1e2, base_test * 1e2),
        ),
        (true, format!("zero-shot MSE x1e-2 (not gated): adapted {:.3}, base {:.3}", adapted_zero * 1e2, base_zero * 1e2)),
        (secs < 1200.0, format!("{secs:.1}s (< 1200s)")),
    ])
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let configs = [
        CostModel::default(),
        CostModel { d_model: 32, d_z: 4, k_width: 48, l_mlp: 4, n_step: 7 },
        CostModel { d_model: 16, d_z: 16, k_width: 16, l_mlp: 2, n_step: 0 },
    ];
    let exact = configs.iter().all(|cm| {
        let (dm, dz, k, l, n) = (cm.d_model as u64, cm.d_z as u64, cm.k_width as u64, cm.l_mlp as u64, cm.n_step as u64);
        let c_param = dm * k + (l - 2) * k * k + k * (dz * dz + dz);
        let c_lin = dz * dz;
        let c_mlp = (dz + dm) * k + (l - 2) * k * k + k * dz;
        cm.c_param() == c_param
            && cm.c_lin() == c_lin
            && cm.c_mlp() == c_mlp
            && flop_estimate(cm, Method::Lass) == c_param + n * c_lin
            && flop_estimate(cm, Method::LatentOde) == n * c_mlp
    });
    let steps = [10, 100, 1_000, 10_000];
    // Fastest median per method over three rounds damps scheduler noise.
    let reports: Vec<_> = (0..3).map(|_| time_integration(&CostModel::default(), &steps, 20, 0).unwrap()).collect();
    let fastest = |method: Method, n: usize| {
        reports
            .iter()
            .flat_map(|r| r.rows.iter())
            .filter(|row| row.method == method && row.n_step == n)
            .map(|row| row.median_ns)
            .fold(f64::INFINITY, f64::min)
    };
    let speedups: Vec<f64> = steps.iter().map(|&n| fastest(Method::LatentOde, n) / fastest(Method::Lass, n)).collect();
    let report = &reports[0];
    let increasing = speedups.windows(2).all(|w| w[1] > w[0]);
    let slopes = (report.loglog_slope(Method::Lass).unwrap(), report.loglog_slope(Method::LatentOde).unwrap());
    let secs = start.elapsed().as_secs_f64();
    verdict(&[
        (exact, "analytic totals equal hand-expanded formulas".into()),
        (
            increasing,
            format!(
                "measured speedup strictly increasing: {}",
                speedups.iter().map(|s| format!("{s:.1}")).collect::<Vec<_>>().join(" < ")
            ),
        ),
        (true, format!("log-log slopes (not gated): lass {:.2}, latent ODE {:.2}", slopes.0, slopes.1)),
        (secs < 300.0, format!("{secs:.1}s (< 300s)")),
    ])
}

fn criterion_8() -> Verdict {
    const RECORDS: usize = 64;
    const BOUND: f64 = 1.25;
    let cfg = ModelConfig::default();
    let params = jittered_params(&cfg, 0, 0.02);
    let batch = make_scenario_batch(Family::Swing, &Sweep::default_for(Family::Swing), &(0..8).collect::<Vec<_>>()).unwrap();
    let recs: Vec<Record> = batch.trajectories.iter().take(RECORDS).map(|t| normalize_record(t, 0.4).unwrap()).collect();
    let lc = LoraConfig::default();
    let (k, r) = (lc.n_clusters, lc.rank);
    let mut b = bank(&cfg, lc, 1);
    randomize_v(&mut b, 2, 0.05);
    let adapter = MixtureAdapter::new(&b);
    // Interleaved rounds; the fastest median of each side is compared.
    let (mut base, mut adapted) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..3 {
        base = base.min(inference_latency(&params, &cfg, &recs, None, 5, false).unwrap().median_seconds);
        adapted = adapted.min(inference_latency(&params, &cfg, &recs, Some(&adapter), 5, false).unwrap().median_seconds);
    }
    let ratio = adapted / base;
    verdict(&[
        (recs.len() == RECORDS, format!("{} records, K={k}, r={r}", recs.len())),
        (ratio < BOUND, format!("adapted/base wall time {ratio:.3} (< {BOUND}); base {:.3}s", base)),
    ])
}

fn criterion_9() -> Verdict {
    let (sys, init) = default_swing_system();
    let tr = simulate_swing(&sys, &init, &EventSchedule::empty(), 1e-3, 15.0).unwrap();
    let eq_dev = tr
        .values
        .iter()
        .map(|v| v.iter().map(|x| (x - v[0]).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);

    let tr = simulate_swing(&sys, &init, &EventSchedule::load_step(0.5, -0.1, 0), 1e-3, 5.0).unwrap();
    let f = tr.channel("freq_dev_1").unwrap();
    let peak = tr
        .times
        .iter()
        .zip(f)
        .filter(|(t, _)| **t > 0.5)
        .map(|(_, v)| *v)
        .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });

    let (mut emt, _) = default_emt_system(0.02, 0.05);
    emt.modes.truncate(1);
    emt.modes[0].u = AcSource::zero(emt.n_nodes());
    emt.schedule.clear();
    let start = EmtInit {
        v: vec![1.0, -0.5, 0.25],
        i_l: vec![0.3, -0.2],
    };
    let tr = simulate_emt(&emt, &start, 0.05, 1e-4).unwrap();
    let (nv, nl) = (emt.n_nodes(), emt.n_branches());
    let energies: Vec<f64> = (0..tr.n_samples())
        .map(|s| {
            let v: Vec<f64> = (0..nv).map(|i| tr.values[i][s]).collect();
            let il: Vec<f64> = (0..nl).map(|j| tr.values[nv + j][s]).collect();
            emt.stored_energy(0, &v, &il)
        })
        .collect();
    let rises = energies.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();

    let mut erl = ErlSystem::default();
    erl.alpha_s = erl.alpha_t;
    erl.beta_s = erl.beta_t;
    erl.xp0 = 0.3;
    erl.xq0 = -0.2;
    let tr = simulate_erl(&erl, &EventSchedule::load_step(3.0, 0.2, 0), 0.01, 30.0).unwrap();
    let decay_err = tr
        .times
        .iter()
        .zip(&tr.values[0])
        .zip(&tr.values[1])
        .map(|((t, xp), xq)| ((xp - 0.3 * (-t / erl.tp).exp()).abs()).max((xq + 0.2 * (-t / erl.tq).exp()).abs()))
        .fold(0.0, f64::max);

    verdict(&[
        (eq_dev < 1e-9, format!("swing equilibrium deviation {eq_dev:.1e} (< 1e-9)")),
        (peak > 0.0, format!("0.1 p.u. load decrease peak freq deviation {peak:+.3e} (> 0)")),
        (rises == 0, format!("EMT passive energy non-increasing over {} samples", energies.len())),
        (decay_err < 1e-6, format!("ERL coincident exponents pure decay error {decay_err:.1e} (< 1e-6)")),
    ])
}

fn file_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_10() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let spec = CorpusSpec::standard(2);
    let recs = build_corpus(&spec, 11).unwrap();
    write_dataset(&recs, &tmp.path().join("a/dataset")).unwrap();
    let (_, back) = read_dataset(&tmp.path().join("a/dataset")).unwrap();
    let dataset_lossless = back == recs;

    let cfg = ModelConfig::tiny();
    let p = jittered_params(&cfg, 12, 0.1);
    save_checkpoint(&tmp.path().join("ck64"), &cfg, &p, Dtype::F64).unwrap();
    let (cfg_back, p64) = load_checkpoint(&tmp.path().join("ck64")).unwrap();
    save_checkpoint(&tmp.path().join("ck32"), &cfg, &p, Dtype::F32).unwrap();
    let (_, p32) = load_checkpoint(&tmp.path().join("ck32")).unwrap();
    let f32_exact = p.iter().all(|(name, m)| {
        let got = p32.get(name).unwrap();
        m.as_slice().iter().zip(got.as_slice()).all(|(a, b)| (*a as f32) as f64 == *b)
    });
    let checkpoint_lossless = cfg_back == cfg && p64 == p && f32_exact;

    let mut b = bank(&cfg, LoraConfig::default(), 13);
    randomize_v(&mut b, 14, 0.1);
    b.save(&tmp.path().join("bank"), Dtype::F64).unwrap();
    let bank_lossless = ExpertBank::load(&tmp.path().join("bank")).unwrap() == b;

    let tcfg = TrainConfig { epochs: 2, batch_size: 2, seed: 15, ..TrainConfig::default() };
    let run_cfg = ModelConfig { max_channels: 8, ..ModelConfig::tiny() };
    let run = |root: &str| {
        let dir = tmp.path().join(root);
        let recs = build_corpus(&spec, 11).unwrap();
        write_dataset(&recs, &dir.join("dataset")).unwrap();
        let train_set: Vec<Record> = recs.into_iter().filter(|r| r.tag == SplitTag::Pretrain).collect();
        let mut params = init_params(&run_cfg, 16).unwrap();
        let report = train(&train_set, &mut params, &run_cfg, &tcfg, Some((&dir.join("model"), Dtype::F32))).unwrap();
        let losses: Vec<f64> = report.history.iter().map(|e| e.loss.total).collect();
        let mut files = file_bytes(&dir);
        files.remove("model/train_log.csv");
        (files, losses)
    };
    let (first, second) = (run("b"), run("c"));
    let deterministic = first == second && first.0.len() > 3;

    verdict(&[
        (dataset_lossless, format!("dataset round trip of {} records lossless", recs.len())),
        (checkpoint_lossless, "model checkpoint lossless in f64, exact f32 rounding in f32".into()),
        (bank_lossless, "expert bank round trip lossless".into()),
        (deterministic, format!("same seeds reproduce {} artifact files and loss curves", first.0.len())),
    ])
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Verdict); 10] = [
        (1, "linear-ODE exactness", criterion_1),
        (2, "gradient fidelity", criterion_2),
        (3, "overfit sanity", criterion_3),
        (4, "LoRA identities", criterion_4),
        (5, "clustering correctness", criterion_5),
        (6, "fine-tuning benefit", criterion_6),
        (7, "cost model", criterion_7),
        (8, "mixture-of-LoRA overhead", criterion_8),
        (9, "simulator physics", criterion_9),
        (10, "serialization and determinism", criterion_10),
    ];
    let mut unexpected = Vec::new();
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let v = run();
        let status = match (v.pass, KNOWN_UNMET.contains(&n)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected.push(n);
                "FAIL"
            }
        };
        println!("criterion {n:>2} {status:<12} {name}: {}", v.detail);
    }
    if !unexpected.is_empty() {
        eprintln!("acceptance: unexpected failures in criteria {unexpected:?}");
        std::process::exit(1);
    }
}

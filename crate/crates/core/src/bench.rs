//! Analytic cost model of the piecewise-linear decoder against a nonlinear
//! MLP latent ODE, with wall-clock measurements of both.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::linear_ode::{augmented_expm, Rk4Workspace, VectorField};
use crate::model::params::trunc_normal;
use crate::model::{predict_trajectory, Adapter, ModelConfig, ParamStore};
use crate::tensor::Mat;

pub const MIN_REPEATS: usize = 20;
const WARMUP_RUNS: usize = 3;
/// Samples shorter than this are not trusted.
const MIN_SAMPLE_NS: f64 = 1_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lass,
    LatentOde,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lass => "lass",
            Method::LatentOde => "latent_ode",
        }
    }
}

/// Sizes entering the per-interval cost of both decoders. `l_mlp` counts
/// weight layers, so `l_mlp - 2` of them are `k_width × k_width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub d_model: usize,
    pub d_z: usize,
    pub k_width: usize,
    pub l_mlp: usize,
    pub n_step: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            d_model: 64,
            d_z: 8,
            k_width: 64,
            l_mlp: 3,
            n_step: 100,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_z == 0 || self.k_width == 0 {
            return Err(Error::InvalidArgument("cost model dimensions must be positive".into()));
        }
        if self.l_mlp < 2 {
            return Err(Error::InvalidArgument("l_mlp must be at least 2".into()));
        }
        Ok(())
    }

    fn hidden(&self) -> u64 {
        (self.l_mlp as u64 - 2) * (self.k_width as u64).pow(2)
    }

    /// One-time cost of producing `(A, b)` from a token.
    pub fn c_param(&self) -> u64 {
        let (dm, dz, k) = (self.d_model as u64, self.d_z as u64, self.k_width as u64);
        dm * k + self.hidden() + k * (dz * dz + dz)
    }

    /// One affine vector-field evaluation.
    pub fn c_lin(&self) -> u64 {
        (self.d_z as u64).pow(2)
    }

    /// One nonlinear derivative evaluation.
    pub fn c_mlp(&self) -> u64 {
        let (dm, dz, k) = (self.d_model as u64, self.d_z as u64, self.k_width as u64);
        (dz + dm) * k + self.hidden() + k * dz
    }

    pub fn with_steps(self, n_step: usize) -> Self {
        CostModel { n_step, ..self }
    }
}

/// Multiply-accumulate count over `cm.n_step` steps.
pub fn flop_estimate(cm: &CostModel, method: Method) -> u64 {
    let n = cm.n_step as u64;
    match method {
        Method::Lass => cm.c_param() + n * cm.c_lin(),
        Method::LatentOde => n * cm.c_mlp(),
    }
}

/// Dense layers with SiLU between them.
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<(Mat, Vec<f64>)>,
}

impl Mlp {
    fn new(rng: &mut ChaCha8Rng, d_in: usize, width: usize, d_out: usize, n_layers: usize) -> Self {
        let mut dims = vec![d_in];
        dims.extend(std::iter::repeat_n(width, n_layers - 1));
        dims.push(d_out);
        let layers = dims
            .windows(2)
            .map(|w| (trunc_normal(rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt()), vec![0.0; w[1]]))
            .collect();
        Mlp { layers }
    }

    fn eval_into(&self, x: &[f64], bufs: &mut [Vec<f64>; 2], out: &mut [f64]) {
        let n = self.layers.len();
        bufs[0].clear();
        bufs[0].extend_from_slice(x);
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let (src, dst) = bufs.split_at_mut(1);
            let (src, dst) = if l % 2 == 0 { (&src[0], &mut dst[0]) } else { (&dst[0], &mut src[0]) };
            dst.clear();
            for (r, bias) in b.iter().enumerate() {
                let v = w.row(r).iter().zip(src.iter()).map(|(a, c)| a * c).sum::<f64>() + bias;
                dst.push(if l + 1 < n { v / (1.0 + (-v).exp()) } else { v });
            }
        }
        out.copy_from_slice(&bufs[n % 2]);
    }
}

struct MlpField<'a> {
    mlp: &'a Mlp,
    context: &'a [f64],
    scratch: RefCell<(Vec<f64>, [Vec<f64>; 2])>,
}

impl VectorField for MlpField<'_> {
    fn dim(&self) -> usize {
        self.mlp.layers.last().map_or(0, |(w, _)| w.rows())
    }

    fn eval(&self, _t: f64, z: &[f64], dz: &mut [f64]) {
        let mut s = self.scratch.borrow_mut();
        let (input, bufs) = &mut *s;
        input.clear();
        input.extend_from_slice(z);
        input.extend_from_slice(self.context);
        self.mlp.eval_into(input, bufs, dz);
    }
}

/// Random weights shared by both decoders for one cost model.
#[derive(Debug, Clone)]
pub struct IntegrationKernels {
    cm: CostModel,
    param_net: Mlp,
    field_net: Mlp,
    token: Vec<f64>,
    z0: Vec<f64>,
}

impl IntegrationKernels {
    pub fn new(cm: &CostModel, seed: u64) -> Result<Self> {
        cm.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dz = cm.d_z;
        let param_net = Mlp::new(&mut rng, cm.d_model, cm.k_width, dz * dz + dz, cm.l_mlp);
        let field_net = Mlp::new(&mut rng, dz + cm.d_model, cm.k_width, dz, cm.l_mlp);
        let token = trunc_normal(&mut rng, 1, cm.d_model, 1.0).into_vec();
        let z0 = trunc_normal(&mut rng, 1, dz, 1.0).into_vec();
        Ok(IntegrationKernels {
            cm: *cm,
            param_net,
            field_net,
            token,
            z0,
        })
    }

    /// One parameterization, one exact propagator over `1 / n_step`, then
    /// `n_step` affine updates.
    pub fn run_lass(&self, n_step: usize) -> Result<Vec<f64>> {
        let dz = self.cm.d_z;
        let mut head = vec![0.0; dz * dz + dz];
        let mut bufs = [Vec::new(), Vec::new()];
        self.param_net.eval_into(&self.token, &mut bufs, &mut head);
        if n_step == 0 {
            return Ok(self.z0.clone());
        }
        let a = Mat::from_vec(dz, dz, head[..dz * dz].to_vec())?.scale(1.0 / dz as f64);
        let step = augmented_expm(&a, &head[dz * dz..], 1.0 / n_step as f64)?;
        let mut z = self.z0.clone();
        let mut next = vec![0.0; dz];
        for _ in 0..n_step {
            for (i, out) in next.iter_mut().enumerate() {
                *out = step.phi.row(i).iter().zip(&z).map(|(p, x)| p * x).sum::<f64>() + step.psi[i];
            }
            std::mem::swap(&mut z, &mut next);
        }
        Ok(z)
    }

    /// RK4 over `(0, 1]` spending `n_step` derivative evaluations, rounded up
    /// to whole steps of four stages.
    pub fn run_latent_ode(&self, n_step: usize) -> Vec<f64> {
        let steps = n_step.div_ceil(4);
        let mut z = self.z0.clone();
        if steps == 0 {
            return z;
        }
        let field = MlpField {
            mlp: &self.field_net,
            context: &self.token,
            scratch: RefCell::new((Vec::new(), [Vec::new(), Vec::new()])),
        };
        let mut ws = Rk4Workspace::new(self.cm.d_z);
        let h = 1.0 / steps as f64;
        for s in 0..steps {
            ws.step(&field, s as f64 * h, &mut z, h);
        }
        z
    }
}

/// Median and interquartile range of repeated wall-clock samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub samples_ns: Vec<f64>,
    pub median_ns: f64,
    pub iqr_ns: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Timing {
    pub fn from_samples(mut samples_ns: Vec<f64>) -> Self {
        let mut sorted = samples_ns.clone();
        sorted.sort_by(f64::total_cmp);
        let median_ns = quantile(&sorted, 0.5);
        let iqr_ns = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        samples_ns.shrink_to_fit();
        Timing {
            samples_ns,
            median_ns,
            iqr_ns,
        }
    }
}

/// Times `repeats` calls of `f` after discarding warm-up calls.
pub fn measure<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<Timing> {
    if repeats < MIN_REPEATS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    for _ in 0..WARMUP_RUNS {
        std::hint::black_box(f()?);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(f()?);
        samples.push(start.elapsed().as_nanos() as f64);
    }
    let timing = Timing::from_samples(samples);
    if timing.median_ns < MIN_SAMPLE_NS {
        return Err(Error::TimerResolution(format!(
            "median sample {:.0} ns is below 1 us; raise n_step so each run lasts longer",
            timing.median_ns
        )));
    }
    Ok(timing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub d_z: usize,
    pub d_model: usize,
    pub k_width: usize,
    pub l_mlp: usize,
    pub n_step: usize,
    pub flops: u64,
    pub median_ns: f64,
    pub iqr_ns: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    fn row(&self, method: Method, n_step: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method && r.n_step == n_step)
    }

    /// Measured baseline time over piecewise-linear time at `n_step`.
    pub fn speedup(&self, n_step: usize) -> Option<f64> {
        Some(self.row(Method::LatentOde, n_step)?.median_ns / self.row(Method::Lass, n_step)?.median_ns)
    }

    /// Analytic baseline count over piecewise-linear count at `n_step`.
    pub fn analytic_speedup(&self, n_step: usize) -> Option<f64> {
        Some(self.row(Method::LatentOde, n_step)?.flops as f64 / self.row(Method::Lass, n_step)?.flops as f64)
    }

    /// Least-squares slope of log median time against log `n_step`.
    pub fn loglog_slope(&self, method: Method) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.n_step > 0)
            .map(|r| ((r.n_step as f64).ln(), r.median_ns.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,d_z,d_model,K_width,L_mlp,n_step,flops,median_ns,iqr_ns\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.method.as_str(),
                r.d_z,
                r.d_model,
                r.k_width,
                r.l_mlp,
                r.n_step,
                r.flops,
                r.median_ns,
                r.iqr_ns
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Times both decoders on identical random weights at each step count.
pub fn time_integration(cm: &CostModel, n_steps: &[usize], repeats: usize, seed: u64) -> Result<BenchReport> {
    let kernels = IntegrationKernels::new(cm, seed)?;
    let mut report = BenchReport::default();
    for &n in n_steps {
        let sized = cm.with_steps(n);
        let lass = measure(repeats, || kernels.run_lass(n))?;
        let ode = measure(repeats, || Ok(kernels.run_latent_ode(n)))?;
        for (method, t) in [(Method::Lass, lass), (Method::LatentOde, ode)] {
            report.rows.push(BenchRow {
                method,
                d_z: cm.d_z,
                d_model: cm.d_model,
                k_width: cm.k_width,
                l_mlp: cm.l_mlp,
                n_step: n,
                flops: flop_estimate(&sized, method),
                median_ns: t.median_ns,
                iqr_ns: t.iqr_ns,
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_records: usize,
    pub runs_seconds: Vec<f64>,
    pub median_seconds: f64,
}

/// Wall time of predicting every record on its own time grid, median over
/// `runs` after one warm-up pass.
pub fn inference_latency(
    params: &ParamStore,
    cfg: &ModelConfig,
    records: &[Record],
    adapter: Option<&dyn Adapter>,
    runs: usize,
    parallel: bool,
) -> Result<LatencyReport> {
    if records.is_empty() {
        return Ok(LatencyReport {
            n_records: 0,
            runs_seconds: Vec::new(),
            median_seconds: 0.0,
        });
    }
    let pass = || -> Result<()> {
        if parallel {
            records
                .par_iter()
                .try_for_each(|r| predict_trajectory(params, cfg, r, &r.times, adapter).map(|_| ()))
        } else {
            records
                .iter()
                .try_for_each(|r| predict_trajectory(params, cfg, r, &r.times, adapter).map(|_| ()))
        }
    };
    pass()?;
    let mut runs_seconds = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        pass()?;
        runs_seconds.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = runs_seconds.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        n_records: records.len(),
        median_seconds: quantile(&sorted, 0.5),
        runs_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_ode::{rk4_oracle, FnField};
    use crate::model::init_params;
    use crate::testutil::synthetic_record;

    #[test]
    fn formulas_expand_by_hand() {
        let cm = CostModel {
            d_model: 64,
            d_z: 8,
            k_width: 64,
            l_mlp: 3,
            n_step: 100,
        };
        assert_eq!(cm.c_param(), 64 * 64 + 64 * 64 + 64 * (64 + 8));
        assert_eq!(cm.c_param(), 12_800);
        assert_eq!(cm.c_lin(), 64);
        assert_eq!(cm.c_mlp(), 72 * 64 + 64 * 64 + 64 * 8);
        assert_eq!(cm.c_mlp(), 9_216);
        assert_eq!(flop_estimate(&cm, Method::Lass), 12_800 + 100 * 64);
        assert_eq!(flop_estimate(&cm, Method::LatentOde), 100 * 9_216);
        let ratio = flop_estimate(&cm, Method::LatentOde) as f64 / flop_estimate(&cm, Method::Lass) as f64;
        assert!((ratio - 921_600.0 / 19_200.0).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_is_parameterization_only() {
        let cm = CostModel::default().with_steps(0);
        assert_eq!(flop_estimate(&cm, Method::Lass), cm.c_param());
        assert_eq!(flop_estimate(&cm, Method::LatentOde), 0);
    }

    #[test]
    fn baseline_cost_is_proportional() {
        for n in [1, 7, 100, 4096] {
            let a = flop_estimate(&CostModel::default().with_steps(n), Method::LatentOde);
            let b = flop_estimate(&CostModel::default().with_steps(2 * n), Method::LatentOde);
            assert_eq!(b, 2 * a);
        }
    }

    #[test]
    fn two_layer_model_drops_hidden_term() {
        let cm = CostModel {
            d_model: 10,
            d_z: 3,
            k_width: 5,
            l_mlp: 2,
            n_step: 1,
        };
        assert_eq!(cm.c_param(), 10 * 5 + 5 * 12);
        assert_eq!(cm.c_mlp(), 13 * 5 + 5 * 3);
        assert!(CostModel { l_mlp: 1, ..cm }.validate().is_err());
    }

    #[test]
    fn lass_kernel_matches_rk4_oracle() {
        let cm = CostModel {
            d_model: 6,
            d_z: 3,
            k_width: 5,
            l_mlp: 3,
            n_step: 0,
        };
        let k = IntegrationKernels::new(&cm, 4).unwrap();
        let mut head = vec![0.0; 12];
        k.param_net.eval_into(&k.token, &mut [Vec::new(), Vec::new()], &mut head);
        let a = Mat::from_vec(3, 3, head[..9].to_vec()).unwrap().scale(1.0 / 3.0);
        let b = head[9..].to_vec();
        let field = FnField {
            dim: 3,
            f: |_t: f64, z: &[f64], dz: &mut [f64]| {
                for i in 0..3 {
                    dz[i] = (0..3).map(|j| a[(i, j)] * z[j]).sum::<f64>() + b[i];
                }
            },
        };
        let oracle = rk4_oracle(&field, &k.z0, 0.0, 1.0, 1e-3).unwrap();
        let got = k.run_lass(50).unwrap();
        for (x, y) in got.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(k.run_lass(0).unwrap(), k.z0);
    }

    #[test]
    fn mlp_matches_direct_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut rng, 4, 6, 2, 3);
        assert_eq!(mlp.layers.len(), 3);
        let x = [0.1, -0.4, 0.3, 0.8];
        let mut h = Mat::row_vector(&x);
        for (l, (w, b)) in mlp.layers.iter().enumerate() {
            h = h.matmul_nt(w).add(&Mat::row_vector(b));
            if l + 1 < mlp.layers.len() {
                h = h.map(|v| v * crate::tape::sigmoid(v));
            }
        }
        let mut out = [0.0; 2];
        mlp.eval_into(&x, &mut [Vec::new(), Vec::new()], &mut out);
        for (a, b) in out.iter().zip(h.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn latent_ode_kernel_spends_whole_steps() {
        let k = IntegrationKernels::new(&CostModel::default(), 2).unwrap();
        assert_eq!(k.run_latent_ode(0), k.z0);
        assert_eq!(k.run_latent_ode(9), k.run_latent_ode(12));
        assert!(k.run_latent_ode(100).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn quantiles_interpolate() {
        let t = Timing::from_samples(vec![4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(t.median_ns, 3.0);
        assert_eq!(t.iqr_ns, 2.0);
    }

    #[test]
    fn measurement_guards() {
        let err = measure(5, || Ok(())).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let err = measure(MIN_REPEATS, || Ok(())).unwrap_err();
        assert!(matches!(err, Error::TimerResolution(_)), "{err}");
    }

    #[test]
    fn report_csv_and_ratios() {
        let report = time_integration(&CostModel::default(), &[100, 1000], MIN_REPEATS, 0).unwrap();
        assert_eq!(report.rows.len(), 4);
        let csv = report.to_csv();
        assert!(csv.starts_with("method,d_z,d_model,K_width,L_mlp,n_step,flops,median_ns,iqr_ns\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(report.speedup(1000).unwrap() > 0.0);
        assert!(report.analytic_speedup(1000).unwrap() > report.analytic_speedup(100).unwrap());
        assert!(report.loglog_slope(Method::LatentOde).is_some());
    }

    #[test]
    fn empty_latency_is_empty() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 0).unwrap();
        let r = inference_latency(&p, &cfg, &[], None, 5, false).unwrap();
        assert_eq!(r.n_records, 0);
        assert!(r.runs_seconds.is_empty());
        let recs: Vec<_> = (0..3).map(|i| synthetic_record(2, 30, i)).collect();
        let r = inference_latency(&p, &cfg, &recs, None, 5, false).unwrap();
        assert_eq!(r.runs_seconds.len(), 5);
        assert!(r.median_seconds > 0.0);
    }
}

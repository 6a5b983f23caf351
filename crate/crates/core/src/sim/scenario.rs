use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::emt::{simulate_emt, AcSource, EmtInit, EmtMode, EmtSystem, ModeSwitch};
use super::erl::{simulate_erl, ErlSystem};
use super::kron::kron_reduce;
use super::swing::{simulate_swing, SwingInit, SwingSystem};
use super::{step_count, EventSchedule, Family, ScenarioMeta, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Mat;

const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * 60.0;

/// Multiplicative jitter: the named parameter is scaled by a factor drawn
/// uniformly from `[low, high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    pub param: String,
    pub low: f64,
    pub high: f64,
}

/// Disturbance sweep for one family. For swing and ERL the magnitude is a
/// load change in p.u.; for EMT it is the fault conductance in siemens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub magnitudes: Vec<f64>,
    #[serde(default)]
    pub jitter: Vec<Jitter>,
    /// Disturbance onset in seconds.
    pub event_time: f64,
    /// Integration step (output step for EMT).
    pub dt: f64,
    pub t_max: f64,
    /// Samples kept per trajectory after decimation, including t = 0.
    pub n_samples: usize,
    /// Generator (swing) receiving the load step.
    #[serde(default)]
    pub target: usize,
    /// Nominal fault duration in seconds (EMT).
    #[serde(default = "default_fault_duration")]
    pub fault_duration: f64,
}

fn default_fault_duration() -> f64 {
    0.05
}

impl Sweep {
    pub fn default_for(family: Family) -> Self {
        let (magnitudes, event_time, dt, t_max, n_samples) = match family {
            Family::Swing => (vec![-0.4, -0.3, -0.2, -0.1, 0.1, 0.2, 0.3, 0.4], 0.5, 1e-3, 15.0, 151),
            Family::Erl => (vec![-0.4, -0.3, -0.2, -0.1, 0.1, 0.2, 0.3, 0.4], 2.0, 0.01, 30.0, 151),
            Family::Emt => (vec![5.0, 10.0, 20.0], 0.02, 1e-3, 0.2, 201),
        };
        Sweep {
            magnitudes,
            jitter: Vec::new(),
            event_time,
            dt,
            t_max,
            n_samples,
            target: 0,
            fault_duration: default_fault_duration(),
        }
    }
}

pub fn jitter_names(family: Family) -> &'static [&'static str] {
    match family {
        Family::Swing => &["inertia", "damping", "reactance", "load"],
        Family::Erl => &["tp", "tq", "alpha_s", "alpha_t", "beta_s", "beta_t", "reactance", "load"],
        Family::Emt => &["capacitance", "inductance", "resistance", "load", "clear_time"],
    }
}

struct Factors(BTreeMap<String, f64>);

impl Factors {
    fn get(&self, name: &str) -> f64 {
        self.0.get(name).copied().unwrap_or(1.0)
    }
}

fn swing_system(f: &Factors) -> Result<(SwingSystem, SwingInit)> {
    // Internal nodes 0-1 behind transient reactance to terminals 2-3; bus 4
    // carries a constant-impedance load.
    let n = 5;
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    let mut branch = |a: usize, b: usize, z: Complex64| {
        let yb = z.inv();
        y[(a, a)] += yb;
        y[(b, b)] += yb;
        y[(a, b)] -= yb;
        y[(b, a)] -= yb;
    };
    let xr = f.get("reactance");
    branch(0, 2, Complex64::new(0.0, 0.3));
    branch(1, 3, Complex64::new(0.0, 0.3));
    branch(2, 4, Complex64::new(0.01, 0.2 * xr));
    branch(3, 4, Complex64::new(0.01, 0.25 * xr));
    branch(2, 3, Complex64::new(0.02, 0.4 * xr));
    let load = f.get("load");
    y[(4, 4)] += Complex64::new(1.5 * load, -0.3 * load);
    y[(2, 2)] += Complex64::new(0.0, 0.05);
    y[(3, 3)] += Complex64::new(0.0, 0.05);
    let y_red = kron_reduce(&y, &[0, 1])?;
    let h = [5.0, 4.0];
    let m = h.iter().map(|h| 2.0 * h * f.get("inertia") / OMEGA_S).collect();
    let d = vec![0.04 * f.get("damping"), 0.03 * f.get("damping")];
    let delta0 = vec![0.35, 0.15];
    let mut sys = SwingSystem::new(m, d, vec![0.0; 2], vec![1.05, 1.02], y_red, OMEGA_S)?;
    sys.balance_at(&delta0);
    Ok((
        sys,
        SwingInit {
            delta: delta0,
            omega: vec![OMEGA_S; 2],
        },
    ))
}

/// Two-machine network at equilibrium.
pub fn default_swing_system() -> (SwingSystem, SwingInit) {
    swing_system(&Factors(BTreeMap::new())).expect("default swing network reduces")
}

fn erl_system(f: &Factors) -> Result<ErlSystem> {
    let mut sys = ErlSystem::default();
    sys.tp *= f.get("tp");
    sys.tq *= f.get("tq");
    sys.alpha_s *= f.get("alpha_s");
    sys.alpha_t *= f.get("alpha_t");
    sys.beta_s *= f.get("beta_s");
    sys.beta_t *= f.get("beta_t");
    sys.thevenin.x *= f.get("reactance");
    sys.pbar *= f.get("load");
    sys.qbar *= f.get("load");
    sys.settle()?;
    Ok(sys)
}

pub fn default_erl_system() -> ErlSystem {
    ErlSystem::default()
}

fn emt_system(f: &Factors, g_fault: f64, t_fault: f64, t_clear: f64) -> Result<(EmtSystem, EmtInit)> {
    let nv = 3;
    let c = Mat::eye(nv).scale(1e-3 * f.get("capacitance"));
    let g_source = 1.0;
    let g_load = 0.5 * f.get("load");
    let mut g = Mat::zeros(nv, nv);
    g.as_mut_slice()[0] = g_source;
    g.as_mut_slice()[4] = g_load;
    g.as_mut_slice()[8] = g_load;
    let mut source = AcSource::zero(nv);
    source.omega = OMEGA_S;
    source.cos_amp[0] = g_source * 1.0;
    let mut g_f = g.clone();
    g_f.as_mut_slice()[4] += g_fault;
    let lambda = Mat::from_rows(&[vec![1.0, -1.0, 0.0], vec![0.0, 1.0, -1.0]])?;
    let sys = EmtSystem {
        modes: vec![
            EmtMode {
                name: "normal".into(),
                c: c.clone(),
                g,
                u: source.clone(),
            },
            EmtMode {
                name: "fault".into(),
                c,
                g: g_f,
                u: source,
            },
        ],
        l: Mat::eye(2).scale(1e-2 * f.get("inductance")),
        r: Mat::eye(2).scale(0.5 * f.get("resistance")),
        lambda,
        schedule: vec![
            ModeSwitch { time: t_fault, mode: 1 },
            ModeSwitch { time: t_clear, mode: 0 },
        ],
    };
    sys.validate()?;
    let init = sys.steady_state(0)?;
    Ok((sys, init))
}

/// Three-node RLC network with a 10 S fault at node 2 applied at `t_fault`
/// and cleared at `t_clear`, started on its periodic steady state.
pub fn default_emt_system(t_fault: f64, t_clear: f64) -> (EmtSystem, EmtInit) {
    emt_system(&Factors(BTreeMap::new()), 10.0, t_fault, t_clear).expect("default EMT network is valid")
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub trajectories: Vec<Trajectory>,
    /// Scenario failures, each wrapped as [`Error::Scenario`].
    pub failures: Vec<Error>,
}

fn run_one(family: Family, sweep: &Sweep, magnitude: f64, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors = BTreeMap::new();
    for j in &sweep.jitter {
        let v = if j.low == j.high { j.low } else { rng.random_range(j.low..=j.high) };
        factors.insert(j.param.clone(), v);
    }
    let factors = Factors(factors);
    let n_steps = step_count(sweep.dt, sweep.t_max)?;
    if sweep.n_samples < 2 || n_steps % (sweep.n_samples - 1) != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} steps cannot be decimated to {} samples",
            n_steps, sweep.n_samples
        )));
    }
    let stride = n_steps / (sweep.n_samples - 1);
    let mut traj = match family {
        Family::Swing => {
            let (sys, init) = swing_system(&factors)?;
            let sched = EventSchedule::load_step(sweep.event_time, magnitude, sweep.target);
            simulate_swing(&sys, &init, &sched, sweep.dt, sweep.t_max)?
        }
        Family::Erl => {
            let sys = erl_system(&factors)?;
            let sched = EventSchedule::load_step(sweep.event_time, magnitude, 0);
            simulate_erl(&sys, &sched, sweep.dt, sweep.t_max)?
        }
        Family::Emt => {
            let t_clear = sweep.event_time + sweep.fault_duration * factors.get("clear_time");
            let (sys, init) = emt_system(&factors, magnitude, sweep.event_time, t_clear)?;
            simulate_emt(&sys, &init, sweep.t_max, sweep.dt)?
        }
    }
    .decimate(stride);
    let flags = std::mem::take(&mut traj.meta.flags);
    let mut meta = ScenarioMeta::new(family, magnitude, seed);
    meta.params = factors.0;
    meta.params.extend(traj.meta.params.clone());
    meta.flags = flags;
    traj.meta = meta;
    traj.validate()?;
    Ok(traj)
}

/// One trajectory per (magnitude, seed) pair, magnitude-major. Physical
/// jitter depends on the seed only, so one seed shares a system across
/// magnitudes. Failed scenarios are reported alongside the successes.
pub fn make_scenario_batch(family: Family, sweep: &Sweep, seeds: &[u64]) -> Result<BatchOutcome> {
    if sweep.magnitudes.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs magnitudes and seeds".into()));
    }
    let names = jitter_names(family);
    for j in &sweep.jitter {
        if !names.contains(&j.param.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "unknown {} jitter parameter {:?}; expected one of {:?}",
                family.as_str(),
                j.param,
                names
            )));
        }
        if !(j.low > 0.0 && j.low <= j.high && j.high.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad jitter range for {}", j.param)));
        }
    }
    let jobs: Vec<(f64, u64)> = sweep
        .magnitudes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<Result<Trajectory>> = jobs
        .par_iter()
        .map(|&(m, s)| {
            run_one(family, sweep, m, s).map_err(|e| Error::Scenario {
                id: ScenarioMeta::new(family, m, s).id,
                source: Box::new(e),
            })
        })
        .collect();
    let mut outcome = BatchOutcome {
        trajectories: Vec::new(),
        failures: Vec::new(),
    };
    for r in results {
        match r {
            Ok(t) => outcome.trajectories.push(t),
            Err(e) => {
                log::warn!("{e}");
                outcome.failures.push(e);
            }
        }
    }
    Ok(outcome)
}

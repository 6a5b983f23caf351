use serde::{Deserialize, Serialize};

use super::{check_divergence, step_count, Family, ScenarioMeta, Trajectory};
use crate::error::{Error, Result};
use crate::linear_ode::{augmented_expm, AffineTransition, DIVERGENCE_BOUND};
use crate::tensor::Mat;

/// Nodal current injection `dc + cos_amp * cos(wt) + sin_amp * sin(wt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcSource {
    pub dc: Vec<f64>,
    pub cos_amp: Vec<f64>,
    pub sin_amp: Vec<f64>,
    pub omega: f64,
}

impl AcSource {
    pub fn zero(n: usize) -> Self {
        AcSource {
            dc: vec![0.0; n],
            cos_amp: vec![0.0; n],
            sin_amp: vec![0.0; n],
            omega: 0.0,
        }
    }

    pub fn eval(&self, t: f64, out: &mut [f64]) {
        let (s, c) = (self.omega * t).sin_cos();
        for i in 0..out.len() {
            out[i] = self.dc[i] + self.cos_amp[i] * c + self.sin_amp[i] * s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmtMode {
    pub name: String,
    pub c: Mat,
    pub g: Mat,
    pub u: AcSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSwitch {
    pub time: f64,
    pub mode: usize,
}

/// Switched nodal network: capacitive nodes coupled through RL branches,
/// `C dv/dt = -G v - Λᵀ i + u`, `L di/dt = Λ v - R i`. Mode 0 holds from
/// t = 0 until the first switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmtSystem {
    pub modes: Vec<EmtMode>,
    pub l: Mat,
    pub r: Mat,
    /// Branch-to-node incidence, one row per branch.
    pub lambda: Mat,
    pub schedule: Vec<ModeSwitch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmtInit {
    pub v: Vec<f64>,
    pub i_l: Vec<f64>,
}

fn is_spd(m: &Mat) -> bool {
    let n = m.rows();
    if m.cols() != n {
        return false;
    }
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (m[(i, j)].abs() + m[(j, i)].abs() + 1e-300) {
                return false;
            }
        }
    }
    let dm = nalgebra::DMatrix::from_row_slice(n, n, m.as_slice());
    nalgebra::Cholesky::new(dm).is_some()
}

/// Per-mode generator over `[v; i_L; cos(wt); sin(wt)]`; the oscillator
/// rows make the sinusoidal source part of an autonomous affine system.
struct ModeGenerator {
    a: Mat,
    b: Vec<f64>,
}

impl EmtSystem {
    pub fn n_nodes(&self) -> usize {
        self.lambda.cols()
    }

    pub fn n_branches(&self) -> usize {
        self.lambda.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (nv, nl) = (self.n_nodes(), self.n_branches());
        if self.modes.is_empty() {
            return Err(Error::ModelConstruction("EMT system needs a mode".into()));
        }
        if self.l.shape() != (nl, nl) || self.r.shape() != (nl, nl) {
            return Err(Error::ModelConstruction("L and R must be branch-square".into()));
        }
        if !is_spd(&self.l) {
            return Err(Error::ModelConstruction("L is not positive definite".into()));
        }
        for m in &self.modes {
            if m.c.shape() != (nv, nv) || m.g.shape() != (nv, nv) {
                return Err(Error::ModelConstruction(format!("mode {} has wrong dimensions", m.name)));
            }
            if [m.u.dc.len(), m.u.cos_amp.len(), m.u.sin_amp.len()].iter().any(|&k| k != nv) {
                return Err(Error::ModelConstruction(format!("mode {} source length", m.name)));
            }
            if !is_spd(&m.c) {
                return Err(Error::ModelConstruction(format!(
                    "capacitance of mode {} is not symmetric positive definite",
                    m.name
                )));
            }
        }
        for w in self.schedule.windows(2) {
            if !(w[0].time < w[1].time) {
                return Err(Error::ModelConstruction("switching instants must increase".into()));
            }
        }
        if self.schedule.iter().any(|s| s.mode >= self.modes.len() || !(s.time > 0.0)) {
            return Err(Error::ModelConstruction("bad mode switch".into()));
        }
        Ok(())
    }

    /// Time of the last switch back into mode 0, or 0 when nothing clears.
    pub fn clearing_time(&self) -> f64 {
        self.schedule
            .iter()
            .rev()
            .find(|s| s.mode == 0)
            .map_or(0.0, |s| s.time)
    }

    /// State matrix and source input map of one mode: `ẋ = M x + B u`.
    pub fn mode_matrices(&self, mode: usize) -> Result<(Mat, Mat)> {
        let (nv, nl) = (self.n_nodes(), self.n_branches());
        let md = &self.modes[mode];
        let c_inv = md.c.solve(&Mat::eye(nv))?;
        let l_inv = self.l.solve(&Mat::eye(nl))?;
        let mut m = Mat::zeros(nv + nl, nv + nl);
        m.set_block(0, 0, &c_inv.matmul(&md.g).scale(-1.0));
        m.set_block(0, nv, &c_inv.matmul(&self.lambda.transpose()).scale(-1.0));
        m.set_block(nv, 0, &l_inv.matmul(&self.lambda));
        m.set_block(nv, nv, &l_inv.matmul(&self.r).scale(-1.0));
        let mut b = Mat::zeros(nv + nl, nv);
        b.set_block(0, 0, &c_inv);
        Ok((m, b))
    }

    fn generator(&self, mode: usize) -> Result<ModeGenerator> {
        let (nv, nl) = (self.n_nodes(), self.n_branches());
        let n = nv + nl;
        let (m, bmap) = self.mode_matrices(mode)?;
        let u = &self.modes[mode].u;
        let mut a = Mat::zeros(n + 2, n + 2);
        a.set_block(0, 0, &m);
        let col = |amp: &[f64]| bmap.matmul(&Mat::col_vector(amp));
        a.set_block(0, n, &col(&u.cos_amp));
        a.set_block(0, n + 1, &col(&u.sin_amp));
        a.as_mut_slice()[n * (n + 2) + n + 1] = -u.omega;
        a.as_mut_slice()[(n + 1) * (n + 2) + n] = u.omega;
        let mut b = col(&u.dc).into_vec();
        b.extend([0.0, 0.0]);
        Ok(ModeGenerator { a, b })
    }

    /// Initial state on the periodic steady state of `mode` at t = 0.
    pub fn steady_state(&self, mode: usize) -> Result<EmtInit> {
        let (nv, nl) = (self.n_nodes(), self.n_branches());
        let n = nv + nl;
        let (m, bmap) = self.mode_matrices(mode)?;
        let u = &self.modes[mode].u;
        let w = u.omega;
        let a_c = bmap.matmul(&Mat::col_vector(&u.cos_amp));
        let a_s = bmap.matmul(&Mat::col_vector(&u.sin_amp));
        let dc = bmap.matmul(&Mat::col_vector(&u.dc));
        // x_p = p cos + q sin: M p - w q = -a_c, w p + M q = -a_s.
        let mut big = Mat::zeros(2 * n, 2 * n);
        big.set_block(0, 0, &m);
        big.set_block(0, n, &Mat::eye(n).scale(-w));
        big.set_block(n, 0, &Mat::eye(n).scale(w));
        big.set_block(n, n, &m);
        let mut rhs = a_c.scale(-1.0).into_vec();
        rhs.extend(a_s.scale(-1.0).into_vec());
        let pq = big.solve(&Mat::col_vector(&rhs))?;
        let x_dc = m.solve(&dc.scale(-1.0))?;
        let x0: Vec<f64> = (0..n).map(|i| pq.as_slice()[i] + x_dc.as_slice()[i]).collect();
        Ok(EmtInit {
            v: x0[..nv].to_vec(),
            i_l: x0[nv..].to_vec(),
        })
    }

    pub fn stored_energy(&self, mode: usize, v: &[f64], i_l: &[f64]) -> f64 {
        let quad = |m: &Mat, x: &[f64]| {
            let mut s = 0.0;
            for i in 0..x.len() {
                for j in 0..x.len() {
                    s += x[i] * m[(i, j)] * x[j];
                }
            }
            s
        };
        0.5 * quad(&self.modes[mode].c, v) + 0.5 * quad(&self.l, i_l)
    }
}

/// Exact per-mode stepping sampled every `dt_out`, with switches landing
/// exactly. Channels are node voltages, branch currents and a constant
/// fault-clearing-time curve.
pub fn simulate_emt(sys: &EmtSystem, init: &EmtInit, t_max: f64, dt_out: f64) -> Result<Trajectory> {
    sys.validate()?;
    let (nv, nl) = (sys.n_nodes(), sys.n_branches());
    let n = nv + nl;
    if init.v.len() != nv || init.i_l.len() != nl {
        return Err(Error::shape("simulate_emt", "init must hold n_v + n_L values"));
    }
    if sys.schedule.iter().any(|s| s.time > t_max) {
        return Err(Error::InvalidArgument("switch scheduled after t_max".into()));
    }
    let n_steps = step_count(dt_out, t_max)?;
    let gens = (0..sys.modes.len())
        .map(|m| sys.generator(m))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.staged("emt-assembly"))?;
    let mut full_step: Vec<Option<AffineTransition>> = (0..sys.modes.len()).map(|_| None).collect();

    let mut x: Vec<f64> = init.v.iter().chain(&init.i_l).copied().collect();
    let mut osc = [1.0, 0.0];
    let mut mode = 0usize;
    let mut next_sw = 0usize;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    states.push(x.clone());

    let advance = |x: &mut Vec<f64>, osc: &mut [f64; 2], tr: &AffineTransition| {
        let mut z = x.clone();
        z.extend(osc.iter());
        let z = tr.apply(&z);
        x.copy_from_slice(&z[..n]);
        osc.copy_from_slice(&z[n..]);
    };

    for k in 0..n_steps {
        let t0 = k as f64 * dt_out;
        let t1 = if k + 1 == n_steps { t_max } else { (k + 1) as f64 * dt_out };
        let mut t = t0;
        loop {
            while next_sw < sys.schedule.len() && sys.schedule[next_sw].time <= t {
                mode = sys.schedule[next_sw].mode;
                next_sw += 1;
            }
            let stop = match sys.schedule.get(next_sw) {
                Some(sw) if sw.time < t1 => sw.time,
                _ => t1,
            };
            let g = &gens[mode];
            if stop == t1 && t == t0 && (t1 - t0 - dt_out).abs() <= 1e-15 * t_max.max(1.0) {
                if full_step[mode].is_none() {
                    full_step[mode] = Some(augmented_expm(&g.a, &g.b, dt_out)?);
                }
                advance(&mut x, &mut osc, full_step[mode].as_ref().unwrap());
            } else {
                let tr = augmented_expm(&g.a, &g.b, stop - t)?;
                advance(&mut x, &mut osc, &tr);
            }
            t = stop;
            if stop == t1 {
                break;
            }
        }
        // Re-anchor the oscillator phase to the clock so rounding does not
        // accumulate over many steps.
        let (s, c) = (sys.modes[mode].u.omega * t1).sin_cos();
        osc = [c, s];
        check_divergence(&x, t1, DIVERGENCE_BOUND)?;
        times.push(t1);
        states.push(x.clone());
    }

    let mut channels = Vec::with_capacity(n + 1);
    let mut values = Vec::with_capacity(n + 1);
    for i in 0..nv {
        channels.push(format!("v_{}", i + 1));
        values.push(states.iter().map(|s| s[i]).collect());
    }
    for j in 0..nl {
        channels.push(format!("i_l{}", j + 1));
        values.push(states.iter().map(|s| s[nv + j]).collect());
    }
    let t_clear = sys.clearing_time();
    channels.push("t_clear".into());
    values.push(vec![t_clear; times.len()]);
    let mut meta = ScenarioMeta::new(Family::Emt, 0.0, 0);
    meta.params.insert("t_clear".into(), t_clear);
    Ok(Trajectory {
        channels,
        times,
        values,
        t_max,
        meta,
    })
}

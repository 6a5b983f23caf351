use serde::{Deserialize, Serialize};

use super::{check_divergence, step_count, EventKind, EventSchedule, Family, ScenarioMeta, Trajectory};
use crate::error::{Error, Result};
use crate::linear_ode::DIVERGENCE_BOUND;

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 30;
const V_FLOOR: f64 = 1e-3;

/// Source EMF at angle zero behind a series impedance `r + jx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thevenin {
    pub e: f64,
    pub r: f64,
    pub x: f64,
}

impl Thevenin {
    /// Real and imaginary parts of `1 / conj(Z)`.
    fn admittance(&self) -> (f64, f64) {
        let z2 = self.r * self.r + self.x * self.x;
        (self.r / z2, self.x / z2)
    }

    /// Complex power delivered to a load bus held at `v` with angle `theta`,
    /// and its partials in (v, theta).
    fn delivered(&self, v: f64, theta: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let (g, b) = self.admittance();
        let (s, c) = theta.sin_cos();
        let re = self.e * v * c - v * v;
        let im = self.e * v * s;
        let p = g * re - b * im;
        let q = b * re + g * im;
        let dre_dv = self.e * c - 2.0 * v;
        let dre_dth = -self.e * v * s;
        let dim_dv = self.e * s;
        let dim_dth = self.e * v * c;
        let jac = [
            [g * dre_dv - b * dim_dv, g * dre_dth - b * dim_dth],
            [b * dre_dv + g * dim_dv, b * dre_dth + g * dim_dth],
        ];
        ([p, q], jac)
    }
}

/// Single exponential-recovery load fed through a Thevenin equivalent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErlSystem {
    pub tp: f64,
    pub tq: f64,
    /// Pre-disturbance load schedule; events step these values.
    pub pbar: f64,
    pub qbar: f64,
    pub alpha_s: f64,
    pub alpha_t: f64,
    pub beta_s: f64,
    pub beta_t: f64,
    pub v0: f64,
    pub thevenin: Thevenin,
    pub xp0: f64,
    pub xq0: f64,
    pub divergence_bound: f64,
}

impl ErlSystem {
    pub fn validate(&self) -> Result<()> {
        if !(self.tp > 0.0 && self.tq > 0.0) {
            return Err(Error::ModelConstruction("recovery time constants must be positive".into()));
        }
        if !(self.v0 > 0.0) {
            return Err(Error::ModelConstruction("V0 must be positive".into()));
        }
        let finite = [
            self.alpha_s,
            self.alpha_t,
            self.beta_s,
            self.beta_t,
            self.pbar,
            self.qbar,
            self.xp0,
            self.xq0,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelConstruction("load parameters must be finite".into()));
        }
        if !(self.thevenin.r * self.thevenin.r + self.thevenin.x * self.thevenin.x > 0.0) {
            return Err(Error::ModelConstruction("Thevenin impedance must be non-zero".into()));
        }
        Ok(())
    }

    /// Sets `v0` to the high-voltage power-flow solution for the nominal
    /// load and zeroes the recovery states, making the initial point an
    /// equilibrium.
    pub fn settle(&mut self) -> Result<()> {
        self.xp0 = 0.0;
        self.xq0 = 0.0;
        let (mut v, mut theta) = (self.thevenin.e, 0.0);
        let constant = |_: f64| ([self.pbar, self.qbar], [0.0, 0.0]);
        let (vn, _) = newton(&self.thevenin, &constant, &mut v, &mut theta, 0.0, &mut Vec::new())?;
        self.v0 = vn;
        Ok(())
    }
}

/// Damped Newton on the two-bus balance `S_delivered(v, theta) = S_load(v)`,
/// updating the warm start in place. `load(v)` returns the demand and its
/// derivative in `v`.
fn newton(
    th: &Thevenin,
    load: &dyn Fn(f64) -> ([f64; 2], [f64; 2]),
    v: &mut f64,
    theta: &mut f64,
    time: f64,
    flags: &mut Vec<String>,
) -> Result<(f64, f64)> {
    let residual = |v: f64, theta: f64| {
        let (s, jac) = th.delivered(v, theta);
        let (l, dl) = load(v);
        let f = [s[0] - l[0], s[1] - l[1]];
        let j = [[jac[0][0] - dl[0], jac[0][1]], [jac[1][0] - dl[1], jac[1][1]]];
        (f, j)
    };
    let norm = |f: [f64; 2]| f[0].hypot(f[1]);
    let (mut f, mut j) = residual(*v, *theta);
    let mut r = norm(f);
    for it in 0..NEWTON_MAX_ITER {
        if r <= NEWTON_TOL {
            return Ok((*v, *theta));
        }
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !(det.abs() > 0.0) || !det.is_finite() {
            return Err(Error::AlgebraicSolve {
                time,
                iterations: it,
                residual: r,
            });
        }
        let dv = (f[0] * j[1][1] - f[1] * j[0][1]) / det;
        let dth = (j[0][0] * f[1] - j[1][0] * f[0]) / det;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let mut v_try = *v - lambda * dv;
            let th_try = *theta - lambda * dth;
            if v_try <= 0.0 {
                v_try = V_FLOOR;
                if !flags.iter().any(|f| f == "voltage-clamped") {
                    flags.push("voltage-clamped".into());
                }
            }
            let (f_try, j_try) = residual(v_try, th_try);
            let r_try = norm(f_try);
            if r_try < r {
                *v = v_try;
                *theta = th_try;
                f = f_try;
                j = j_try;
                r = r_try;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if r <= NEWTON_TOL {
        return Ok((*v, *theta));
    }
    Err(Error::AlgebraicSolve {
        time,
        iterations: NEWTON_MAX_ITER,
        residual: r,
    })
}

struct ErlState<'a> {
    sys: &'a ErlSystem,
    pbar: f64,
    qbar: f64,
    v: f64,
    theta: f64,
    flags: Vec<String>,
}

impl ErlState<'_> {
    /// Solves the network for the given recovery states and returns the
    /// voltage.
    fn voltage(&mut self, xp: f64, xq: f64, time: f64) -> Result<f64> {
        let s = self.sys;
        let (pbar, qbar) = (self.pbar, self.qbar);
        let load = move |v: f64| {
            let r = v / s.v0;
            let pt = pbar * r.powf(s.alpha_t);
            let qt = qbar * r.powf(s.beta_t);
            (
                [xp / s.tp + pt, xq / s.tq + qt],
                [pt * s.alpha_t / v, qt * s.beta_t / v],
            )
        };
        let (mut v, mut theta) = (self.v, self.theta);
        newton(&s.thevenin, &load, &mut v, &mut theta, time, &mut self.flags)?;
        self.v = v;
        self.theta = theta;
        Ok(v)
    }

    fn rhs(&mut self, x: [f64; 2], time: f64) -> Result<([f64; 2], f64)> {
        let s = self.sys;
        let v = self.voltage(x[0], x[1], time)?;
        let r = v / s.v0;
        let dxp = -x[0] / s.tp + self.pbar * (r.powf(s.alpha_s) - r.powf(s.alpha_t));
        let dxq = -x[1] / s.tq + self.qbar * (r.powf(s.beta_s) - r.powf(s.beta_t));
        Ok(([dxp, dxq], v))
    }

    fn rk4(&mut self, x: &mut [f64; 2], t: f64, h: f64) -> Result<()> {
        let add = |x: [f64; 2], k: [f64; 2], c: f64| [x[0] + c * k[0], x[1] + c * k[1]];
        let (k1, _) = self.rhs(*x, t)?;
        let (k2, _) = self.rhs(add(*x, k1, 0.5 * h), t + 0.5 * h)?;
        let (k3, _) = self.rhs(add(*x, k2, 0.5 * h), t + 0.5 * h)?;
        let (k4, _) = self.rhs(add(*x, k3, h), t + h)?;
        for i in 0..2 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(())
    }
}

/// Recovery states advance by RK4 with a Newton network solve at every
/// stage. A load step of `magnitude` p.u. raises the active schedule by that
/// amount and the reactive schedule in proportion.
pub fn simulate_erl(sys: &ErlSystem, schedule: &EventSchedule, dt: f64, t_max: f64) -> Result<Trajectory> {
    sys.validate()?;
    schedule.check_horizon(t_max)?;
    if schedule.events().iter().any(|e| e.kind != EventKind::LoadStep) {
        return Err(Error::InvalidArgument("ERL schedules accept load steps only".into()));
    }
    let n_steps = step_count(dt, t_max)?;
    let mut st = ErlState {
        sys,
        pbar: sys.pbar,
        qbar: sys.qbar,
        v: sys.v0,
        theta: 0.0,
        flags: Vec::new(),
    };
    let mut x = [sys.xp0, sys.xq0];
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut xs = Vec::with_capacity(n_steps + 1);
    let mut vs = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    xs.push(x);
    vs.push(st.voltage(x[0], x[1], 0.0)?);

    let events = schedule.events();
    let mut next_ev = 0;
    let ratio = if sys.pbar != 0.0 { sys.qbar / sys.pbar } else { 0.0 };
    for k in 0..n_steps {
        let t0 = k as f64 * dt;
        let t1 = if k + 1 == n_steps { t_max } else { (k + 1) as f64 * dt };
        let mut t = t0;
        loop {
            while next_ev < events.len() && events[next_ev].time <= t {
                st.pbar += events[next_ev].magnitude;
                st.qbar += events[next_ev].magnitude * ratio;
                next_ev += 1;
            }
            let stop = match events.get(next_ev) {
                Some(ev) if ev.time < t1 => ev.time,
                _ => t1,
            };
            st.rk4(&mut x, t, stop - t)?;
            t = stop;
            if stop == t1 {
                break;
            }
        }
        // Sampled voltage reflects the schedule in force right after t1.
        while next_ev < events.len() && events[next_ev].time <= t1 && t1 < t_max {
            st.pbar += events[next_ev].magnitude;
            st.qbar += events[next_ev].magnitude * ratio;
            next_ev += 1;
        }
        let v = st.voltage(x[0], x[1], t1)?;
        check_divergence(&[x[0], x[1], v], t1, sys.divergence_bound)?;
        times.push(t1);
        xs.push(x);
        vs.push(v);
    }
    let mut meta = ScenarioMeta::new(Family::Erl, events.first().map_or(0.0, |e| e.magnitude), 0);
    meta.flags = st.flags;
    Ok(Trajectory {
        channels: vec!["x_p".into(), "x_q".into(), "v_load".into()],
        times,
        values: vec![
            xs.iter().map(|x| x[0]).collect(),
            xs.iter().map(|x| x[1]).collect(),
            vs,
        ],
        t_max,
        meta,
    })
}

impl Default for ErlSystem {
    fn default() -> Self {
        let mut sys = ErlSystem {
            tp: 5.0,
            tq: 5.0,
            pbar: 1.0,
            qbar: 0.3,
            alpha_s: 1.5,
            alpha_t: 0.5,
            beta_s: 2.5,
            beta_t: 1.0,
            v0: 1.0,
            thevenin: Thevenin { e: 1.05, r: 0.02, x: 0.25 },
            xp0: 0.0,
            xq0: 0.0,
            divergence_bound: DIVERGENCE_BOUND,
        };
        sys.settle().expect("default ERL operating point solves");
        sys
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_is_constant() {
        let sys = ErlSystem::default();
        let tr = simulate_erl(&sys, &EventSchedule::empty(), 0.01, 30.0).unwrap();
        for (ch, v) in tr.channels.iter().zip(&tr.values) {
            let dev = v.iter().map(|x| (x - v[0]).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-9, "{ch} deviates by {dev}");
        }
        assert!((tr.values[2][0] - sys.v0).abs() < 1e-9);
    }

    #[test]
    fn equal_exponents_decay_purely() {
        let mut sys = ErlSystem::default();
        sys.alpha_s = sys.alpha_t;
        sys.beta_s = sys.beta_t;
        sys.xp0 = 0.3;
        sys.xq0 = -0.2;
        let sched = EventSchedule::load_step(3.0, 0.2, 0);
        let tr = simulate_erl(&sys, &sched, 0.01, 30.0).unwrap();
        for (t, xp) in tr.times.iter().zip(&tr.values[0]) {
            assert!((xp - 0.3 * (-t / sys.tp).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn load_step_drop_then_partial_recovery() {
        let sys = ErlSystem::default();
        let sched = EventSchedule::load_step(1.0, 0.2 * sys.pbar, 0);
        let tr = simulate_erl(&sys, &sched, 0.01, 30.0).unwrap();
        let v = &tr.values[2];
        let i_min = v
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(tr.times[i_min] >= 1.0);
        assert!(v[i_min] < sys.v0);
        let v_end = *v.last().unwrap();
        assert!(v_end > v[i_min] && v_end < sys.v0);

        let fine = simulate_erl(&sys, &sched, 0.001, 30.0).unwrap();
        for (i, t) in tr.times.iter().enumerate() {
            let j = i * 10;
            assert_eq!(fine.times[j].to_bits(), t.to_bits());
            for c in 0..3 {
                assert!((tr.values[c][i] - fine.values[c][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let mut sys = ErlSystem::default();
        sys.xp0 = 0.4;
        sys.xq0 = 0.1;
        let t_max = 10.0;
        let oracle = simulate_erl(&sys, &EventSchedule::empty(), 0.005, t_max).unwrap();
        let err = |dt: f64| {
            let tr = simulate_erl(&sys, &EventSchedule::empty(), dt, t_max).unwrap();
            (0..2)
                .map(|c| (tr.values[c].last().unwrap() - oracle.values[c].last().unwrap()).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(2.0), err(1.0));
        assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn collapse_reports_algebraic_failure() {
        // Constant-power transient load beyond the maximum transfer has no
        // network solution.
        let mut sys = ErlSystem::default();
        sys.alpha_t = 0.0;
        sys.beta_t = 0.0;
        let sched = EventSchedule::load_step(1.0, 10.0, 0);
        match simulate_erl(&sys, &sched, 0.01, 5.0) {
            Err(Error::AlgebraicSolve { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected algebraic failure, got {other:?}"),
        }
    }
}

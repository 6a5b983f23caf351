use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{check_divergence, step_count, EventKind, EventSchedule, Family, ScenarioMeta, Trajectory};
use crate::error::{Error, Result};
use crate::linear_ode::{Rk4Workspace, VectorField, DIVERGENCE_BOUND};

/// Classical multi-machine model reduced to generator internal nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SwingSystem {
    pub m: Vec<f64>,
    pub d: Vec<f64>,
    pub pm: Vec<f64>,
    pub e: Vec<f64>,
    pub y_red: DMatrix<Complex64>,
    pub omega_s: f64,
    pub divergence_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwingInit {
    pub delta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl SwingSystem {
    pub fn new(
        m: Vec<f64>,
        d: Vec<f64>,
        pm: Vec<f64>,
        e: Vec<f64>,
        y_red: DMatrix<Complex64>,
        omega_s: f64,
    ) -> Result<Self> {
        let sys = SwingSystem {
            m,
            d,
            pm,
            e,
            y_red,
            omega_s,
            divergence_bound: DIVERGENCE_BOUND,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn n_gen(&self) -> usize {
        self.m.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_gen();
        if n == 0 {
            return Err(Error::ModelConstruction("swing system needs a generator".into()));
        }
        if [self.d.len(), self.pm.len(), self.e.len(), self.y_red.nrows(), self.y_red.ncols()]
            .iter()
            .any(|&k| k != n)
        {
            return Err(Error::ModelConstruction("swing system dimensions disagree".into()));
        }
        if self.m.iter().any(|&m| !(m > 0.0)) || self.d.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::ModelConstruction("need M > 0 and D >= 0".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if (self.y_red[(i, j)] - self.y_red[(j, i)]).norm() > 1e-12 * (1.0 + self.y_red[(i, j)].norm()) {
                    return Err(Error::ModelConstruction("reduced admittance is not symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Electrical power injected by each machine at rotor angles `delta`.
    pub fn electrical_power(&self, delta: &[f64], out: &mut [f64]) {
        let n = self.n_gen();
        for i in 0..n {
            let mut p = self.e[i] * self.e[i] * self.y_red[(i, i)].re;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let y = self.y_red[(i, j)];
                let (s, c) = (delta[i] - delta[j]).sin_cos();
                p += self.e[i] * self.e[j] * (y.im * s + y.re * c);
            }
            out[i] = p;
        }
    }

    /// Sets `Pm = Pe(delta0)` so that `delta0` with synchronous speed is an
    /// equilibrium.
    pub fn balance_at(&mut self, delta0: &[f64]) {
        let mut pe = vec![0.0; self.n_gen()];
        self.electrical_power(delta0, &mut pe);
        self.pm = pe;
    }
}

struct SwingField<'a> {
    sys: &'a SwingSystem,
    pm: Vec<f64>,
    pe: std::cell::RefCell<Vec<f64>>,
}

impl VectorField for SwingField<'_> {
    fn dim(&self) -> usize {
        2 * self.sys.n_gen()
    }

    fn eval(&self, _t: f64, z: &[f64], dz: &mut [f64]) {
        let n = self.sys.n_gen();
        let (delta, omega) = z.split_at(n);
        let mut pe = self.pe.borrow_mut();
        self.sys.electrical_power(delta, &mut pe);
        for i in 0..n {
            let slip = omega[i] - self.sys.omega_s;
            dz[i] = slip;
            dz[n + i] = (self.pm[i] - pe[i] - self.sys.d[i] * slip) / self.sys.m[i];
        }
    }
}

/// Fixed-step RK4 integration sampled every `dt`. Load steps of `magnitude`
/// p.u. at generator `target` act as `Pm[target] -= magnitude`; steps are
/// split exactly at event times.
pub fn simulate_swing(
    sys: &SwingSystem,
    init: &SwingInit,
    schedule: &EventSchedule,
    dt: f64,
    t_max: f64,
) -> Result<Trajectory> {
    sys.validate()?;
    let n = sys.n_gen();
    if init.delta.len() != n || init.omega.len() != n {
        return Err(Error::shape("simulate_swing", "init does not match n_gen"));
    }
    schedule.check_horizon(t_max)?;
    for ev in schedule.events() {
        if ev.kind != EventKind::LoadStep || ev.target >= n {
            return Err(Error::InvalidArgument(
                "swing schedules accept load steps on existing generators".into(),
            ));
        }
    }
    let n_steps = step_count(dt, t_max)?;

    let mut field = SwingField {
        sys,
        pm: sys.pm.clone(),
        pe: std::cell::RefCell::new(vec![0.0; n]),
    };
    let mut z: Vec<f64> = init.delta.iter().chain(&init.omega).copied().collect();
    let mut ws = Rk4Workspace::new(2 * n);
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    states.push(z.clone());

    let events = schedule.events();
    let mut next_ev = 0;
    for k in 0..n_steps {
        let t0 = k as f64 * dt;
        let t1 = if k + 1 == n_steps { t_max } else { (k + 1) as f64 * dt };
        let mut t = t0;
        loop {
            while next_ev < events.len() && events[next_ev].time <= t {
                let ev = &events[next_ev];
                field.pm[ev.target] -= ev.magnitude;
                next_ev += 1;
            }
            let stop = match events.get(next_ev) {
                Some(ev) if ev.time < t1 => ev.time,
                _ => t1,
            };
            ws.step(&field, t, &mut z, stop - t);
            t = stop;
            if stop == t1 {
                break;
            }
        }
        check_divergence(&z, t1, sys.divergence_bound)?;
        times.push(t1);
        states.push(z.clone());
    }

    let two_pi = 2.0 * std::f64::consts::PI;
    let mut channels = Vec::with_capacity(3 * n);
    let mut values = Vec::with_capacity(3 * n);
    for i in 0..n {
        channels.push(format!("delta_{}", i + 1));
        values.push(states.iter().map(|s| s[i]).collect());
    }
    for i in 0..n {
        channels.push(format!("omega_{}", i + 1));
        values.push(states.iter().map(|s| s[n + i]).collect());
    }
    for i in 0..n {
        channels.push(format!("freq_dev_{}", i + 1));
        values.push(states.iter().map(|s| (s[n + i] - sys.omega_s) / two_pi).collect());
    }
    let magnitude = events.first().map_or(0.0, |e| e.magnitude);
    Ok(Trajectory {
        channels,
        times,
        values,
        t_max,
        meta: ScenarioMeta::new(Family::Swing, magnitude, 0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::default_swing_system;

    fn two_machine() -> (SwingSystem, SwingInit) {
        let (sys, init) = default_swing_system();
        (sys, init)
    }

    #[test]
    fn equilibrium_is_constant() {
        let (sys, init) = two_machine();
        let tr = simulate_swing(&sys, &init, &EventSchedule::empty(), 1e-3, 15.0).unwrap();
        for (ch, v) in tr.channels.iter().zip(&tr.values) {
            let dev = v.iter().map(|x| (x - v[0]).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-9, "{ch} deviates by {dev}");
        }
    }

    #[test]
    fn load_decrease_gives_over_frequency() {
        let (sys, init) = two_machine();
        let sched = EventSchedule::load_step(0.5, -0.1, 0);
        let tr = simulate_swing(&sys, &init, &sched, 1e-3, 5.0).unwrap();
        let f = tr.channel("freq_dev_1").unwrap();
        let post: Vec<f64> = tr.times.iter().zip(f).filter(|(t, _)| **t > 0.5).map(|(_, v)| *v).collect();
        let ext = post.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(ext > 0.0);
    }

    #[test]
    fn matches_fine_step_oracle() {
        let (sys, init) = two_machine();
        let sched = EventSchedule::load_step(0.25, 0.2, 1);
        let coarse = simulate_swing(&sys, &init, &sched, 1e-3, 1.0).unwrap();
        let fine = simulate_swing(&sys, &init, &sched, 1e-5, 1.0).unwrap();
        let n = sys.n_gen();
        for ch in 0..2 * n {
            let a = coarse.values[ch].last().unwrap();
            let b = fine.values[ch].last().unwrap();
            assert!((a - b).abs() < 1e-6, "channel {ch}: {a} vs {b}");
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let (sys, mut init) = two_machine();
        init.omega[0] += 0.5;
        let t_max = 1.0;
        let oracle = simulate_swing(&sys, &init, &EventSchedule::empty(), 1e-4, t_max).unwrap();
        let err = |dt: f64| {
            let tr = simulate_swing(&sys, &init, &EventSchedule::empty(), dt, t_max).unwrap();
            (0..tr.values.len())
                .map(|c| (tr.values[c].last().unwrap() - oracle.values[c].last().unwrap()).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(0.02), err(0.01));
        assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut sys, init) = two_machine();
        sys.divergence_bound = 400.0;
        let sched = EventSchedule::load_step(0.0, -50.0, 0);
        match simulate_swing(&sys, &init, &sched, 1e-3, 5.0) {
            Err(Error::Divergence { time, .. }) => assert!(time > 0.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn deterministic() {
        let (sys, init) = two_machine();
        let sched = EventSchedule::load_step(0.1, 0.3, 0);
        let a = simulate_swing(&sys, &init, &sched, 1e-3, 2.0).unwrap();
        let b = simulate_swing(&sys, &init, &sched, 1e-3, 2.0).unwrap();
        assert_eq!(a, b);
    }
}

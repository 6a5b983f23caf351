//! Ground-truth trajectory generators for three power-system DAE families:
//! classical multi-machine swing dynamics, exponential-recovery loads behind
//! a Thevenin source, and switched-linear electromagnetic transients.

mod emt;
mod erl;
mod kron;
mod scenario;
mod swing;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use emt::{simulate_emt, AcSource, EmtInit, EmtMode, EmtSystem, ModeSwitch};
pub use erl::{simulate_erl, ErlSystem, Thevenin};
pub use kron::kron_reduce;
pub use scenario::{
    default_emt_system, default_erl_system, default_swing_system, make_scenario_batch,
    jitter_names, BatchOutcome, Jitter, Sweep,
};
pub use swing::{simulate_swing, SwingInit, SwingSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Swing,
    Erl,
    Emt,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Swing => "swing",
            Family::Erl => "erl",
            Family::Emt => "emt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    LoadStep,
    FaultApply,
    FaultClear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    /// Load change in p.u. for load steps; ignored by fault events.
    pub magnitude: f64,
    pub target: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSchedule {
    events: Vec<Event>,
}

impl EventSchedule {
    pub fn empty() -> Self {
        EventSchedule { events: Vec::new() }
    }

    pub fn new(events: Vec<Event>) -> Result<Self> {
        for w in events.windows(2) {
            if !(w[0].time < w[1].time) {
                return Err(Error::InvalidArgument(
                    "event times must be strictly increasing".into(),
                ));
            }
        }
        if events.iter().any(|e| !(e.time >= 0.0) || !e.magnitude.is_finite()) {
            return Err(Error::InvalidArgument("event times must be >= 0".into()));
        }
        Ok(EventSchedule { events })
    }

    pub fn load_step(time: f64, magnitude: f64, target: usize) -> Self {
        EventSchedule {
            events: vec![Event {
                time,
                kind: EventKind::LoadStep,
                magnitude,
                target,
            }],
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub(crate) fn check_horizon(&self, t_max: f64) -> Result<()> {
        if self.events.iter().any(|e| e.time > t_max) {
            return Err(Error::InvalidArgument(format!(
                "event scheduled after t_max = {t_max}"
            )));
        }
        Ok(())
    }
}

/// Scenario identifiers carried with every trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub id: String,
    pub family: Family,
    pub magnitude: f64,
    pub seed: u64,
    /// Jittered physical parameters, by name.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Diagnostics raised during simulation (e.g. clamped voltage iterates).
    #[serde(default)]
    pub flags: Vec<String>,
}

impl ScenarioMeta {
    pub fn new(family: Family, magnitude: f64, seed: u64) -> Self {
        ScenarioMeta {
            id: format!("{}-m{:+.3}-s{}", family.as_str(), magnitude, seed),
            family,
            magnitude,
            seed,
            params: BTreeMap::new(),
            flags: Vec::new(),
        }
    }
}

/// Multi-channel sampled record in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub channels: Vec<String>,
    pub times: Vec<f64>,
    /// `values[channel][sample]`.
    pub values: Vec<Vec<f64>>,
    pub t_max: f64,
    pub meta: ScenarioMeta,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.channels.len() {
            return Err(Error::shape("Trajectory", "channel count differs from value rows"));
        }
        if self.times.first() != Some(&0.0) {
            return Err(Error::InvalidArgument("trajectory must start at t = 0".into()));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("sample times must increase".into()));
        }
        if *self.times.last().unwrap() > self.t_max {
            return Err(Error::InvalidArgument("samples beyond t_max".into()));
        }
        for (name, ch) in self.channels.iter().zip(&self.values) {
            if ch.len() != self.times.len() {
                return Err(Error::shape("Trajectory", format!("channel {name} length")));
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("trajectory channel {name}"),
                });
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.times.len()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels
            .iter()
            .position(|c| c == name)
            .map(|i| self.values[i].as_slice())
    }

    /// Keeps every `stride`-th sample starting from the first.
    pub fn decimate(&self, stride: usize) -> Trajectory {
        let stride = stride.max(1);
        let pick = |v: &Vec<f64>| v.iter().step_by(stride).copied().collect::<Vec<_>>();
        Trajectory {
            channels: self.channels.clone(),
            times: pick(&self.times),
            values: self.values.iter().map(pick).collect(),
            t_max: self.t_max,
            meta: self.meta.clone(),
        }
    }
}

/// Number of steps of size `dt` covering `t_max`; `t_max` must be a whole
/// multiple of `dt` up to rounding.
pub(crate) fn step_count(dt: f64, t_max: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt = {dt} and t_max = {t_max} must be positive"
        )));
    }
    let n = (t_max / dt).round();
    if ((n * dt) - t_max).abs() > 1e-9 * t_max {
        return Err(Error::InvalidArgument(format!(
            "t_max = {t_max} is not a multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

pub(crate) fn check_divergence(state: &[f64], t: f64, bound: f64) -> Result<()> {
    let m = state.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(m <= bound) {
        return Err(Error::Divergence { time: t, magnitude: m });
    }
    Ok(())
}

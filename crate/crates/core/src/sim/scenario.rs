//! Scenario description: timed events over a network, plus run settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::SubsystemId;

/// What changes at an event timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventAction {
    /// Reactivate a subsystem, optionally with a fresh state (by state name).
    Connect { id: SubsystemId, state: Option<Vec<(String, f64)>> },
    Disconnect { id: SubsystemId },
    SetpointStep { id: SubsystemId, field: SetpointField, value: f64 },
    /// Linear interpolation from the current setpoint to `value` over `duration`.
    SetpointRamp { id: SubsystemId, field: SetpointField, value: f64, duration: f64 },
    /// Multiply pump params (R_P, J_P, C_P) and valve C_v of the listed
    /// subsystems (all when empty) by iid factors 1 + U(-magnitude, magnitude).
    PerturbParams { ids: Vec<SubsystemId>, magnitude: f64, seed: u64 },
    Saturation { on: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetpointField {
    Flow,
    Pressure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub time: f64,
    pub action: EventAction,
}

/// Integrator selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Integrator {
    Rk4,
    Rk45 { rtol: f64, atol: f64 },
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::Rk4
    }
}

/// A timed simulation program over a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub t_end: f64,
    pub dt: f64,
    #[serde(default)]
    pub integrator: Integrator,
    /// Record every `stride`-th step.
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
    /// Initial saturation policy for all valve inputs.
    #[serde(default)]
    pub saturation: bool,
    /// Start from rest instead of the equilibrium of the initial config.
    #[serde(default)]
    pub from_rest: bool,
}

fn default_stride() -> usize {
    10
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Scenario(format!("dt must be positive, got {}", self.dt)));
        }
        if self.t_end < 0.0 {
            return Err(Error::Scenario("t_end must be nonnegative".into()));
        }
        if self.stride == 0 {
            return Err(Error::Scenario("stride must be at least 1".into()));
        }
        let mut last = 0.0f64;
        for ev in &self.events {
            if ev.time < 0.0 || ev.time > self.t_end {
                return Err(Error::Scenario(format!(
                    "event at t = {} outside [0, {}]",
                    ev.time, self.t_end
                )));
            }
            if ev.time < last {
                return Err(Error::Scenario("events must be time-sorted".into()));
            }
            last = ev.time;
            if let EventAction::SetpointRamp { duration, .. } = ev.action {
                if duration <= 0.0 {
                    return Err(Error::Scenario("ramp duration must be positive".into()));
                }
            }
            if let EventAction::PerturbParams { magnitude, .. } = ev.action {
                if !(0.0..1.0).contains(&magnitude) {
                    return Err(Error::Scenario("perturbation magnitude must lie in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }
}

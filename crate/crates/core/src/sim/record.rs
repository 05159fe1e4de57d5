//! Trajectory recording: uniform sample grid of states, ports, inputs and
//! diagnostics, split into constant-configuration segments.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::topology::SubsystemId;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub network: String,
    pub scenario: String,
    pub dt: f64,
    pub integrator: String,
    pub stride: usize,
    pub seed: Option<u64>,
}

/// Per-subsystem equilibrium references of one segment.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SegmentRefs {
    /// Reference state slice per subsystem label.
    pub xbar: BTreeMap<String, Vec<f64>>,
    pub dbar: BTreeMap<String, f64>,
    pub zbar: BTreeMap<String, f64>,
}

/// A maximal interval with constant configuration (no events, no ramps).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Whether a setpoint ramp is active during this segment; certificate
    /// and Lyapunov audits skip ramp segments.
    pub ramp: bool,
    pub refs: Option<SegmentRefs>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub unit: String,
    pub values: Vec<f64>,
}

/// Complete record of one run. All channels share the sample grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub meta: RunMeta,
    pub times: Vec<f64>,
    pub channels: Vec<Channel>,
    pub segments: Vec<SegmentInfo>,
    /// Segment index of each sample.
    pub segment_of: Vec<usize>,
    /// Subsystem labels in canonical order at t = 0.
    pub subsystems: Vec<String>,
    pub events_applied: Vec<(f64, String)>,
    /// Valve subsystems that hit a saturation bound, with first-hit time.
    pub saturation_hits: Vec<(String, f64)>,
    /// Maximum |Σ z·d| / Σ|z·d| over every vector-field evaluation.
    pub max_power_residual_rel: f64,
    /// Maximum junction flow residual over all accepted steps.
    pub max_manifold_residual: f64,
    /// Set when the run aborted on a non-finite state; the record holds
    /// everything sampled up to the last good step.
    pub aborted: Option<String>,
    pub runtime_ms: f64,
}

impl TrajectoryRecord {
    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn channel_values(&self, name: &str) -> Option<&[f64]> {
        self.channel(name).map(|c| c.values.as_slice())
    }

    /// Sample indices belonging to a segment.
    pub fn segment_samples(&self, segment: usize) -> Vec<usize> {
        self.segment_of
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == segment)
            .map(|(i, _)| i)
            .collect()
    }

    /// Write the full channel table as CSV: `time_s` first, then
    /// `<subsystem>.<channel>[unit]` columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("time_s");
        for c in &self.channels {
            header.push(',');
            header.push_str(&format!("{}[{}]", c.name, c.unit));
        }
        writeln!(w, "{header}")?;
        for (i, t) in self.times.iter().enumerate() {
            let mut line = format_float(*t);
            for c in &self.channels {
                line.push(',');
                line.push_str(&format_float(c.values[i]));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Write a channel subset as CSV, by exact channel name.
    pub fn write_csv_subset<W: Write>(&self, mut w: W, names: &[String]) -> Result<()> {
        let cols: Vec<&Channel> = names.iter().filter_map(|n| self.channel(n)).collect();
        let mut header = String::from("time_s");
        for c in &cols {
            header.push(',');
            header.push_str(&format!("{}[{}]", c.name, c.unit));
        }
        writeln!(w, "{header}")?;
        for (i, t) in self.times.iter().enumerate() {
            let mut line = format_float(*t);
            for c in &cols {
                line.push(',');
                line.push_str(&format_float(c.values[i]));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Shortest round-trip float formatting; locale-independent by construction.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        let mut s = format!("{v}");
        if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("nan") {
            s.push_str(".0");
        }
        s
    }
}

/// Channel-name helper: `<label>.<field>`.
pub fn channel_name(label: &str, field: &str) -> String {
    format!("{label}.{field}")
}

/// State-field units per canonical state name.
pub fn state_unit(state: &str) -> &'static str {
    match state {
        "q" | "q_pump" => "m3_per_s",
        "p" | "p_pump" => "Pa",
        "r" | "r_pump" => "flow-integrator",
        "r_valve" => "1",
        _ => "1",
    }
}

/// Lookup helper used by event handling and CLI reporting.
pub fn subsystem_label(id: SubsystemId, class: &str) -> String {
    match id {
        SubsystemId::Edge(i) => format!("{class}{i}"),
        SubsystemId::Node(i) => format!("{class}{i}"),
    }
}

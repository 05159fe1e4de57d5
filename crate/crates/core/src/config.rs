//! Structured-text file formats: network descriptions, scenarios and
//! state snapshots, plus the bundled example fixtures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::components::{
    FrictionLaw, PipeHydraulics, PumpParams, ValveCharacteristic, ValveParams, DEFAULT_S_MIN,
};
use crate::control::{PumpFlowGains, PumpPressureGains, ValveFlowGains};
use crate::error::{Error, Result};
use crate::sim::{Assembly, EventAction, Scenario, SetpointField, TimedEvent};
use crate::topology::{
    ConsumerMode, DguMode, EdgeKind, FlowPump, NetworkGraph, NodeKind, PressurePump, SubsystemId,
};

// ---------------------------------------------------------------------------
// network files

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkFile {
    pub name: String,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u32,
    pub kind: String,
    #[serde(default = "default_true")]
    pub active: bool,
    pub capacitance: Option<f64>,
    pub pressure_setpoint: Option<f64>,
    pub pump: Option<PumpSpec>,
    pub controller: Option<PressureControllerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub id: u32,
    pub kind: String,
    pub source: u32,
    pub target: u32,
    #[serde(default = "default_true")]
    pub active: bool,
    pub mode: Option<String>,
    pub pipe: Option<PipeSpec>,
    pub valve: Option<ValveSpec>,
    pub pump: Option<PumpSpec>,
    pub pump_controller: Option<PressureControllerSpec>,
    pub flow_controller: Option<FlowControllerSpec>,
    pub valve_controller: Option<FlowControllerSpec>,
    pub pressure_setpoint: Option<f64>,
    pub flow_setpoint: Option<f64>,
    pub booster: Option<BoosterSpec>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PumpSpec {
    pub r_p: f64,
    pub j_p: Option<f64>,
    pub c_p: Option<f64>,
}

impl PumpSpec {
    pub fn resolve(&self) -> Result<PumpParams> {
        match (self.j_p, self.c_p) {
            (Some(j), Some(c)) => PumpParams::new(self.r_p, j, c),
            (None, None) => PumpParams::from_resistance(self.r_p),
            _ => Err(Error::Parse("pump spec needs both j_p and c_p or neither".into())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PressureControllerSpec {
    pub q_i: Option<f64>,
    pub q_i_inv: Option<f64>,
    /// Defaults to the pump resistance.
    pub r_damp: Option<f64>,
}

impl PressureControllerSpec {
    pub fn resolve(&self, pump: &PumpParams) -> Result<PumpPressureGains> {
        let q_i = resolve_q_i(self.q_i, self.q_i_inv)?;
        PumpPressureGains::new(self.r_damp.unwrap_or(pump.r_p), q_i)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowControllerSpec {
    pub k_p: f64,
    pub q_i: Option<f64>,
    pub q_i_inv: Option<f64>,
}

fn resolve_q_i(q_i: Option<f64>, q_i_inv: Option<f64>) -> Result<f64> {
    match (q_i, q_i_inv) {
        (Some(v), None) => Ok(v),
        (None, Some(inv)) if inv > 0.0 => Ok(1.0 / inv),
        (None, Some(inv)) => Err(Error::Parse(format!("q_i_inv must be positive, got {inv}"))),
        (Some(_), Some(_)) => Err(Error::Parse("give q_i or q_i_inv, not both".into())),
        (None, None) => Err(Error::Parse("controller needs q_i or q_i_inv".into())),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipeSpec {
    pub length: Option<f64>,
    pub diameter: Option<f64>,
    pub roughness: Option<f64>,
    pub inertance: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl PipeSpec {
    pub fn resolve(&self) -> Result<PipeHydraulics> {
        match (self.inertance, self.a, self.b) {
            (Some(j), Some(a), Some(b)) => PipeHydraulics::new(j, FrictionLaw { a, b }),
            (None, None, None) => {
                let (Some(l), Some(d), Some(k)) = (self.length, self.diameter, self.roughness)
                else {
                    return Err(Error::Parse(
                        "pipe spec needs length/diameter/roughness or inertance/a/b".into(),
                    ));
                };
                PipeHydraulics::from_geometry(d, l, k)
            }
            _ => Err(Error::Parse(
                "pipe spec mixes geometric and explicit coefficients".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValveSpec {
    pub c_v: f64,
    pub characteristic: Option<String>,
    pub rangeability: Option<f64>,
    pub s_min: Option<f64>,
}

impl ValveSpec {
    pub fn resolve(&self) -> Result<ValveParams> {
        let characteristic = match self.characteristic.as_deref() {
            None | Some("linear") => ValveCharacteristic::Linear,
            Some("equal_percentage") => ValveCharacteristic::EqualPercentage {
                rangeability: self.rangeability.ok_or_else(|| {
                    Error::Parse("equal-percentage valve needs a rangeability".into())
                })?,
            },
            Some(other) => {
                return Err(Error::Parse(format!("unknown valve characteristic '{other}'")))
            }
        };
        ValveParams::new(self.c_v, characteristic, self.s_min.unwrap_or(DEFAULT_S_MIN))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoosterSpec {
    pub pump: PumpSpec,
    pub controller: PressureControllerSpec,
    pub pressure_setpoint: f64,
}

impl BoosterSpec {
    pub fn resolve(&self) -> Result<PressurePump> {
        let pump = self.pump.resolve()?;
        Ok(PressurePump {
            pump,
            gains: self.controller.resolve(&pump)?,
            setpoint: self.pressure_setpoint,
        })
    }
}

impl NetworkFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("network file: {e}")))
    }

    pub fn build(&self) -> Result<NetworkGraph> {
        let mut graph = NetworkGraph::new(self.name.clone());
        for node in &self.nodes {
            let kind = match node.kind.as_str() {
                "holding" => {
                    let pump_spec = node.pump.as_ref().ok_or_else(|| {
                        Error::Parse(format!("holding node {} needs a pump", node.id))
                    })?;
                    let pump = pump_spec.resolve()?;
                    let ctl = node.controller.as_ref().ok_or_else(|| {
                        Error::Parse(format!("holding node {} needs a controller", node.id))
                    })?;
                    let setpoint = node.pressure_setpoint.ok_or_else(|| {
                        Error::Parse(format!("holding node {} needs a pressure setpoint", node.id))
                    })?;
                    if setpoint <= 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "holding node {}: pressure setpoint must be positive",
                            node.id
                        )));
                    }
                    NodeKind::PressureHolding {
                        pump: PressurePump { pump, gains: ctl.resolve(&pump)?, setpoint },
                    }
                }
                "capacitive" => {
                    let c = node.capacitance.ok_or_else(|| {
                        Error::Parse(format!("capacitive node {} needs a capacitance", node.id))
                    })?;
                    if c <= 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "capacitive node {}: capacitance must be positive",
                            node.id
                        )));
                    }
                    NodeKind::Capacitive { capacitance: c }
                }
                "junction" => NodeKind::Junction,
                other => {
                    return Err(Error::Parse(format!(
                        "node {}: unknown kind '{other}'",
                        node.id
                    )))
                }
            };
            graph.add_node(node.id, kind)?;
            if !node.active {
                graph.set_node_active(node.id, false)?;
            }
        }
        for edge in &self.edges {
            let kind = self.build_edge(edge)?;
            graph.add_edge(edge.id, edge.source, edge.target, kind)?;
            if !edge.active {
                graph.set_edge_active(edge.id, false)?;
            }
        }
        Ok(graph)
    }

    fn build_edge(&self, edge: &EdgeSpec) -> Result<EdgeKind> {
        let pipe = |e: &EdgeSpec| -> Result<PipeHydraulics> {
            e.pipe
                .as_ref()
                .ok_or_else(|| Error::Parse(format!("edge {} needs a pipe", e.id)))?
                .resolve()
        };
        let valve = |e: &EdgeSpec| -> Result<ValveParams> {
            e.valve
                .as_ref()
                .ok_or_else(|| Error::Parse(format!("edge {} needs a valve", e.id)))?
                .resolve()
        };
        let valve_gains = |e: &EdgeSpec| -> Result<ValveFlowGains> {
            let spec = e
                .valve_controller
                .as_ref()
                .ok_or_else(|| Error::Parse(format!("edge {} needs a valve controller", e.id)))?;
            ValveFlowGains::new(spec.k_p, resolve_q_i(spec.q_i, spec.q_i_inv)?)
        };
        let pressure_pump = |e: &EdgeSpec| -> Result<PressurePump> {
            let pump = e
                .pump
                .as_ref()
                .ok_or_else(|| Error::Parse(format!("edge {} needs a pump", e.id)))?
                .resolve()?;
            let ctl = e.pump_controller.as_ref().ok_or_else(|| {
                Error::Parse(format!("edge {} needs a pump controller", e.id))
            })?;
            let setpoint = e.pressure_setpoint.ok_or_else(|| {
                Error::Parse(format!("edge {} needs a pressure setpoint", e.id))
            })?;
            if setpoint <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "edge {}: pressure setpoint must be positive",
                    e.id
                )));
            }
            Ok(PressurePump { pump, gains: ctl.resolve(&pump)?, setpoint })
        };
        let flow_pump = |e: &EdgeSpec| -> Result<FlowPump> {
            let pump = e
                .pump
                .as_ref()
                .ok_or_else(|| Error::Parse(format!("edge {} needs a pump", e.id)))?
                .resolve()?;
            let spec = e.flow_controller.as_ref().ok_or_else(|| {
                Error::Parse(format!("edge {} needs a flow controller", e.id))
            })?;
            let gains = PumpFlowGains::new(spec.k_p, resolve_q_i(spec.q_i, spec.q_i_inv)?, pump.c_p)?;
            Ok(FlowPump { pump, gains })
        };

        Ok(match edge.kind.as_str() {
            "dgu" => {
                let mode = match edge.mode.as_deref() {
                    Some("form") => DguMode::Form,
                    Some("valve") => DguMode::Valve,
                    Some("vsp") => DguMode::Vsp,
                    other => {
                        return Err(Error::Parse(format!(
                            "dgu {}: unknown mode {other:?}",
                            edge.id
                        )))
                    }
                };
                let (pp, fp, vg) = match mode {
                    DguMode::Form => (Some(pressure_pump(edge)?), None, None),
                    DguMode::Valve => {
                        (Some(pressure_pump(edge)?), None, Some(valve_gains(edge)?))
                    }
                    DguMode::Vsp => (None, Some(flow_pump(edge)?), None),
                };
                EdgeKind::Dgu {
                    mode,
                    pipe: pipe(edge)?,
                    valve: valve(edge)?,
                    pressure_pump: pp,
                    flow_pump: fp,
                    valve_gains: vg,
                    flow_setpoint: edge.flow_setpoint,
                }
            }
            "consumer" => {
                let mode = match edge.mode.as_deref() {
                    Some("boost") => ConsumerMode::Boost,
                    Some("valve") => ConsumerMode::Valve,
                    Some("vsp") => ConsumerMode::Vsp,
                    other => {
                        return Err(Error::Parse(format!(
                            "consumer {}: unknown mode {other:?}",
                            edge.id
                        )))
                    }
                };
                let (pp, fp, vg) = match mode {
                    ConsumerMode::Boost => {
                        (Some(pressure_pump(edge)?), None, Some(valve_gains(edge)?))
                    }
                    ConsumerMode::Valve => (None, None, Some(valve_gains(edge)?)),
                    ConsumerMode::Vsp => (None, Some(flow_pump(edge)?), None),
                };
                EdgeKind::Consumer {
                    mode,
                    pipe: pipe(edge)?,
                    valve: valve(edge)?,
                    pressure_pump: pp,
                    flow_pump: fp,
                    valve_gains: vg,
                    flow_setpoint: edge.flow_setpoint.ok_or_else(|| {
                        Error::Parse(format!("consumer {} needs a flow setpoint", edge.id))
                    })?,
                }
            }
            "pipe" => EdgeKind::Pipe {
                pipe: pipe(edge)?,
                booster: edge.booster.as_ref().map(|b| b.resolve()).transpose()?,
            },
            "mixing" => EdgeKind::Mixing {
                pipe: pipe(edge)?,
                valve: valve(edge)?,
                valve_gains: valve_gains(edge)?,
                flow_setpoint: edge.flow_setpoint.ok_or_else(|| {
                    Error::Parse(format!("mixing edge {} needs a flow setpoint", edge.id))
                })?,
            },
            other => return Err(Error::Parse(format!("edge {}: unknown kind '{other}'", edge.id))),
        })
    }
}

/// Parse and build in one step.
pub fn load_network(text: &str) -> Result<NetworkGraph> {
    NetworkFile::parse(text)?.build()
}

// ---------------------------------------------------------------------------
// subsystem labels

/// Parse a label like `dgu3`, `cons4`, `pipe15`, `mix25`, `hold4`, `cap1`.
pub fn parse_subsystem_label(label: &str) -> Result<SubsystemId> {
    let split = label.find(|c: char| c.is_ascii_digit()).ok_or_else(|| {
        Error::Parse(format!("subsystem label '{label}' has no numeric id"))
    })?;
    let (prefix, digits) = label.split_at(split);
    let id: u32 = digits
        .parse()
        .map_err(|_| Error::Parse(format!("subsystem label '{label}' has a bad id")))?;
    match prefix {
        "dgu" | "cons" | "pipe" | "mix" | "edge" => Ok(SubsystemId::Edge(id)),
        "hold" | "cap" | "junc" | "node" => Ok(SubsystemId::Node(id)),
        _ => Err(Error::Parse(format!("unknown subsystem label prefix '{prefix}'"))),
    }
}

/// Canonical label of a subsystem within a graph.
pub fn subsystem_label(graph: &NetworkGraph, id: SubsystemId) -> Result<String> {
    match id {
        SubsystemId::Edge(e) => {
            let rec = graph.edge(e).ok_or(Error::UnknownSubsystem(format!("edge {e}")))?;
            Ok(format!("{}{}", rec.kind.class_name(), e))
        }
        SubsystemId::Node(n) => {
            let rec = graph.node(n).ok_or(Error::UnknownSubsystem(format!("node {n}")))?;
            Ok(format!("{}{}", rec.kind.class_name(), n))
        }
    }
}

/// Resolve a label against a graph, verifying the class prefix.
pub fn resolve_subsystem(graph: &NetworkGraph, label: &str) -> Result<SubsystemId> {
    let id = parse_subsystem_label(label)?;
    let canonical = subsystem_label(graph, id)?;
    if canonical != label && !label.starts_with("edge") && !label.starts_with("node") {
        return Err(Error::Parse(format!(
            "label '{label}' does not match the subsystem's class '{canonical}'"
        )));
    }
    Ok(id)
}

// ---------------------------------------------------------------------------
// scenario files

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub name: String,
    pub t_end: f64,
    pub dt: f64,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub saturation: bool,
    #[serde(default)]
    pub from_rest: bool,
    #[serde(default)]
    pub integrator: Option<IntegratorSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub kind: String,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventSpec {
    pub time: f64,
    pub action: String,
    pub subsystem: Option<String>,
    #[serde(default)]
    pub subsystems: Vec<String>,
    pub field: Option<String>,
    pub value: Option<f64>,
    pub duration: Option<f64>,
    pub magnitude: Option<f64>,
    pub seed: Option<u64>,
    pub on: Option<bool>,
    pub state: Option<BTreeMap<String, f64>>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("scenario file: {e}")))
    }

    /// Bind subsystem labels against a network.
    pub fn resolve(&self, graph: &NetworkGraph) -> Result<Scenario> {
        let mut events = Vec::new();
        for (i, spec) in self.events.iter().enumerate() {
            let line = |msg: &str| Error::Parse(format!("event {}: {msg}", i + 1));
            let subsystem = || -> Result<SubsystemId> {
                let label = spec
                    .subsystem
                    .as_deref()
                    .ok_or_else(|| line("missing 'subsystem'"))?;
                resolve_subsystem(graph, label)
            };
            let field = || -> Result<SetpointField> {
                match spec.field.as_deref() {
                    Some("flow") => Ok(SetpointField::Flow),
                    Some("pressure") => Ok(SetpointField::Pressure),
                    other => Err(line(&format!("bad field {other:?}"))),
                }
            };
            let value = || spec.value.ok_or_else(|| line("missing 'value'"));
            let action = match spec.action.as_str() {
                "connect" => EventAction::Connect {
                    id: subsystem()?,
                    state: spec
                        .state
                        .as_ref()
                        .map(|m| m.iter().map(|(k, v)| (k.clone(), *v)).collect()),
                },
                "disconnect" => EventAction::Disconnect { id: subsystem()? },
                "setpoint_step" => {
                    EventAction::SetpointStep { id: subsystem()?, field: field()?, value: value()? }
                }
                "setpoint_ramp" => EventAction::SetpointRamp {
                    id: subsystem()?,
                    field: field()?,
                    value: value()?,
                    duration: spec.duration.ok_or_else(|| line("missing 'duration'"))?,
                },
                "perturb_params" => EventAction::PerturbParams {
                    ids: spec
                        .subsystems
                        .iter()
                        .map(|l| resolve_subsystem(graph, l))
                        .collect::<Result<Vec<_>>>()?,
                    magnitude: spec.magnitude.ok_or_else(|| line("missing 'magnitude'"))?,
                    seed: spec.seed.ok_or_else(|| line("missing 'seed'"))?,
                },
                "saturation" => {
                    EventAction::Saturation { on: spec.on.ok_or_else(|| line("missing 'on'"))? }
                }
                other => return Err(line(&format!("unknown action '{other}'"))),
            };
            events.push(TimedEvent { time: spec.time, action });
        }
        let integrator = match &self.integrator {
            None => crate::sim::Integrator::Rk4,
            Some(spec) => match spec.kind.as_str() {
                "rk4" => crate::sim::Integrator::Rk4,
                "rk45" => crate::sim::Integrator::Rk45 {
                    rtol: spec.rtol.unwrap_or(1e-6),
                    atol: spec.atol.unwrap_or(1e-9),
                },
                other => return Err(Error::Parse(format!("unknown integrator '{other}'"))),
            },
        };
        let scenario = Scenario {
            name: self.name.clone(),
            t_end: self.t_end,
            dt: self.dt,
            integrator,
            stride: self.stride.unwrap_or(10),
            events,
            saturation: self.saturation,
            from_rest: self.from_rest,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

pub fn load_scenario(text: &str, graph: &NetworkGraph) -> Result<Scenario> {
    ScenarioFile::parse(text)?.resolve(graph)
}

// ---------------------------------------------------------------------------
// state snapshots

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateFile {
    pub time: f64,
    /// Subsystem label -> state name -> value.
    pub subsystems: BTreeMap<String, BTreeMap<String, f64>>,
}

impl StateFile {
    pub fn from_assembly(assembly: &Assembly, x: &nalgebra::DVector<f64>, time: f64) -> Self {
        let mut subsystems = BTreeMap::new();
        for (i, (_, range)) in assembly.layout.entries().enumerate() {
            let mut states = BTreeMap::new();
            for (k, name) in assembly.models[i].state_names().iter().enumerate() {
                states.insert(name.to_string(), x[range.start + k]);
            }
            subsystems.insert(assembly.labels[i].clone(), states);
        }
        Self { time, subsystems }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("state encode: {e}")))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("state file: {e}")))
    }

    /// Stack into a state vector for an assembly with matching labels.
    pub fn to_vector(&self, assembly: &Assembly) -> Result<nalgebra::DVector<f64>> {
        let mut x = nalgebra::DVector::zeros(assembly.n_states());
        for (i, (_, range)) in assembly.layout.entries().enumerate() {
            let label = &assembly.labels[i];
            let states = self
                .subsystems
                .get(label)
                .ok_or_else(|| Error::Parse(format!("state file misses subsystem '{label}'")))?;
            for (k, name) in assembly.models[i].state_names().iter().enumerate() {
                x[range.start + k] = *states
                    .get(*name)
                    .ok_or_else(|| Error::Parse(format!("{label}: missing state '{name}'")))?;
            }
        }
        Ok(x)
    }
}

// ---------------------------------------------------------------------------
// bundled fixtures

pub mod fixtures {
    //! The bundled example network (17 nodes, 25 edges, one junction,
    //! one holding unit) and its two demonstration scenarios, plus small
    //! builders shared by the test suites.

    use super::*;

    pub const PAPER_NETWORK_TOML: &str = include_str!("../fixtures/paper_network.toml");
    pub const SCENARIO_A_TOML: &str = include_str!("../fixtures/scenario_a.toml");
    pub const SCENARIO_B_TOML: &str = include_str!("../fixtures/scenario_b.toml");
    pub const MINIMAL_LOOP_TOML: &str = include_str!("../fixtures/minimal_loop.toml");

    /// The bundled demonstration network.
    pub fn paper_network() -> Result<NetworkGraph> {
        load_network(PAPER_NETWORK_TOML)
    }

    /// Plug-and-play / setpoint-change scenario.
    pub fn scenario_a(graph: &NetworkGraph) -> Result<Scenario> {
        load_scenario(SCENARIO_A_TOML, graph)
    }

    /// Parameter-uncertainty / valve-saturation scenario.
    pub fn scenario_b(graph: &NetworkGraph) -> Result<Scenario> {
        load_scenario(SCENARIO_B_TOML, graph)
    }

    /// Four-subsystem ring: one grid-forming DGU, two pipes, one
    /// valve-controlled consumer.
    pub fn minimal_loop_network() -> Result<NetworkGraph> {
        load_network(MINIMAL_LOOP_TOML)
    }

    pub fn pressure_pump_bundle(setpoint: f64) -> PressurePump {
        let pump = PumpParams::from_resistance(1e6).unwrap();
        PressurePump {
            pump,
            gains: PumpPressureGains::new(pump.r_p, 1.0 / 3.64e-7).unwrap(),
            setpoint,
        }
    }

    pub fn flow_pump_bundle() -> FlowPump {
        let pump = PumpParams::from_resistance(1e10).unwrap();
        FlowPump { pump, gains: PumpFlowGains::new(2.0, 1.0 / 2e10, pump.c_p).unwrap() }
    }

    pub fn fixture_valve() -> ValveParams {
        ValveParams::new(
            7.9e-5,
            ValveCharacteristic::EqualPercentage { rangeability: 50.0 },
            0.02,
        )
        .unwrap()
    }

    pub fn fixture_valve_gains() -> ValveFlowGains {
        ValveFlowGains::new(1e3, 1e-4).unwrap()
    }

    pub fn dn32_pipe(length: f64) -> PipeHydraulics {
        PipeHydraulics::from_geometry(0.0359, length, 4.5e-5).unwrap()
    }

    pub fn dn80_pipe(length: f64) -> PipeHydraulics {
        PipeHydraulics::from_geometry(0.0825, length, 4.5e-5).unwrap()
    }

    pub fn dgu_form_edge(pressure_setpoint: f64) -> EdgeKind {
        EdgeKind::Dgu {
            mode: DguMode::Form,
            pipe: dn32_pipe(25.0),
            valve: fixture_valve(),
            pressure_pump: Some(pressure_pump_bundle(pressure_setpoint)),
            flow_pump: None,
            valve_gains: None,
            flow_setpoint: None,
        }
    }

    pub fn dgu_vsp_edge(flow_setpoint: f64) -> EdgeKind {
        EdgeKind::Dgu {
            mode: DguMode::Vsp,
            pipe: dn32_pipe(25.0),
            valve: fixture_valve(),
            pressure_pump: None,
            flow_pump: Some(flow_pump_bundle()),
            valve_gains: None,
            flow_setpoint: Some(flow_setpoint),
        }
    }

    pub fn consumer_valve_edge(flow_setpoint: f64) -> EdgeKind {
        EdgeKind::Consumer {
            mode: ConsumerMode::Valve,
            pipe: dn32_pipe(25.0),
            valve: fixture_valve(),
            pressure_pump: None,
            flow_pump: None,
            valve_gains: Some(fixture_valve_gains()),
            flow_setpoint,
        }
    }

    pub fn mixing_edge(flow_setpoint: f64) -> EdgeKind {
        EdgeKind::Mixing {
            pipe: dn80_pipe(25.0),
            valve: fixture_valve(),
            valve_gains: fixture_valve_gains(),
            flow_setpoint,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_network_parses_and_counts_match() {
        let g = fixtures::paper_network().unwrap();
        assert_eq!(g.nodes().count(), 17);
        assert_eq!(g.edges().count(), 25);
        // DGU 3 starts disconnected
        assert!(!g.edge(3).unwrap().active);
    }

    #[test]
    fn bundled_scenarios_parse() {
        let g = fixtures::paper_network().unwrap();
        let a = fixtures::scenario_a(&g).unwrap();
        assert_eq!(a.t_end, 50.0);
        assert_eq!(a.events.len(), 7);
        let b = fixtures::scenario_b(&g).unwrap();
        assert!(b.saturation);
        assert!(b.events.iter().any(|e| matches!(e.action, EventAction::PerturbParams { .. })));
    }

    #[test]
    fn subsystem_labels_round_trip() {
        let g = fixtures::paper_network().unwrap();
        assert_eq!(resolve_subsystem(&g, "dgu1").unwrap(), SubsystemId::Edge(1));
        assert_eq!(resolve_subsystem(&g, "cons4").unwrap(), SubsystemId::Edge(4));
        assert_eq!(resolve_subsystem(&g, "hold4").unwrap(), SubsystemId::Node(4));
        assert_eq!(resolve_subsystem(&g, "junc7").unwrap(), SubsystemId::Node(7));
        assert!(resolve_subsystem(&g, "dgu4").is_err()); // edge 4 is a consumer
        assert!(resolve_subsystem(&g, "widget3").is_err());
    }

    #[test]
    fn minimal_loop_parses() {
        let g = fixtures::minimal_loop_network().unwrap();
        assert_eq!(g.nodes().count(), 4);
        assert_eq!(g.edges().count(), 4);
    }

    #[test]
    fn schema_violations_are_reported() {
        let bad = r#"
name = "broken"
[[nodes]]
id = 1
kind = "capacitive"
"#;
        let err = load_network(bad).unwrap_err();
        assert!(err.to_string().contains("capacitance"));
    }
}

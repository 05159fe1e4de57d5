//! Scenario execution: integrate the closed-loop network through timed
//! events, maintaining per-segment equilibrium references, augmented
//! supply quadrature and the full diagnostic record.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::{LoopKind, SubsystemModel};
use crate::error::{Error, Result};
use crate::passivity::{solve_equilibrium, EquilibriumOptions, EquilibriumSolution, StorageSpec};
use crate::sim::record::{
    format_float, Channel, RunMeta, SegmentInfo, SegmentRefs, TrajectoryRecord,
};
use crate::sim::scenario::{EventAction, Integrator, Scenario, SetpointField};
use crate::sim::{rk45_step, rk4_step, Assembly, PortData};
use crate::topology::{validate_network, EdgeKind, NetworkGraph, NodeKind, SubsystemId};

/// Run settings beyond what the scenario file carries.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub network_name: String,
    pub scenario_name: String,
    /// Recorded in the metadata; perturbation seeds live in the events.
    pub seed: Option<u64>,
    /// Override the scenario's initial saturation policy.
    pub saturation_override: Option<bool>,
    /// Start from rest instead of the initial-configuration equilibrium.
    pub from_rest_override: Option<bool>,
}

const MANIFOLD_GUARD: f64 = 1e-10;

#[derive(Debug, Clone)]
struct ActiveRamp {
    id: SubsystemId,
    field: SetpointField,
    from: f64,
    to: f64,
    t0: f64,
    t1: f64,
}

struct ChannelTable {
    names: Vec<String>,
    units: Vec<String>,
    index: BTreeMap<String, usize>,
    rows: Vec<Vec<f64>>,
}

impl ChannelTable {
    fn new() -> Self {
        Self { names: Vec::new(), units: Vec::new(), index: BTreeMap::new(), rows: Vec::new() }
    }

    fn add(&mut self, name: String, unit: &str) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.units.push(unit.to_string());
    }

    fn row(&mut self) -> &mut Vec<f64> {
        self.rows.push(vec![f64::NAN; self.names.len()]);
        self.rows.last_mut().unwrap()
    }

    fn set(row: &mut [f64], index: &BTreeMap<String, usize>, name: &str, value: f64) {
        if let Some(&i) = index.get(name) {
            row[i] = value;
        }
    }
}

/// Everything the integrator loop mutates.
struct Engine {
    assembly: Assembly,
    x: DVector<f64>,
    time: f64,
    parked: BTreeMap<SubsystemId, Vec<f64>>,
    ramps: Vec<ActiveRamp>,
    specs: Option<Vec<StorageSpec>>,
    refs: Option<EquilibriumSolution>,
    /// Per-subsystem supply integrals of the current segment.
    supply: DVector<f64>,
    max_power_rel: f64,
    max_manifold: f64,
    saturated_any: bool,
}

impl Engine {
    fn n(&self) -> usize {
        self.assembly.n_states()
    }

    fn apply_ramps(&mut self, t: f64) {
        for ramp in &self.ramps {
            let frac = ((t - ramp.t0) / (ramp.t1 - ramp.t0)).clamp(0.0, 1.0);
            let value = ramp.from + frac * (ramp.to - ramp.from);
            if let Some(idx) = self.assembly.ids.iter().position(|id| *id == ramp.id) {
                set_model_setpoint(&mut self.assembly.models[idx], ramp.field, value);
            }
        }
    }

    /// Combined rhs of plant states and supply quadrature.
    fn augmented_rhs(&self, xs: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        let n = self.n();
        let n_sub = self.assembly.n_subsystems();
        let x = DVector::from_column_slice(&xs.as_slice()[..n]);
        let mut dx = DVector::zeros(n);
        if let Some(refs) = &self.refs {
            let mut ports = PortData::default();
            self.assembly.vector_field(&x, &mut dx, Some(&mut ports))?;
            for i in 0..n_sub {
                out[n + i] = (ports.z[i] - refs.zbar[i]) * (ports.d[i] - refs.dbar[i]);
            }
        } else {
            self.assembly.vector_field(&x, &mut dx, None)?;
            for i in 0..n_sub {
                out[n + i] = 0.0;
            }
        }
        out.as_mut_slice()[..n].copy_from_slice(dx.as_slice());
        Ok(())
    }

    fn step(&mut self, h: f64, integrator: Integrator) -> Result<()> {
        let n = self.n();
        let n_sub = self.assembly.n_subsystems();
        let mut xs = DVector::zeros(n + n_sub);
        xs.as_mut_slice()[..n].copy_from_slice(self.x.as_slice());
        xs.as_mut_slice()[n..].copy_from_slice(self.supply.as_slice());

        let this = &*self;
        let mut f = |x: &DVector<f64>, out: &mut DVector<f64>| this.augmented_rhs(x, out);
        let next = match integrator {
            Integrator::Rk4 => rk4_step(&mut f, &xs, h)?,
            Integrator::Rk45 { rtol, atol } => {
                // embedded pair used at the scenario step size with the same
                // event-aligned grid; the error estimate guards the step
                let (x5, err) = rk45_step(&mut f, &xs, h, atol, rtol)?;
                if err > 1.0 {
                    // one halving retry keeps the grid while tightening accuracy
                    let (mut acc, _) = rk45_step(&mut f, &xs, h / 2.0, atol, rtol)?;
                    let this2 = &*self;
                    let mut f2 =
                        |x: &DVector<f64>, out: &mut DVector<f64>| this2.augmented_rhs(x, out);
                    let (x_fin, _) = rk45_step(&mut f2, &acc, h / 2.0, atol, rtol)?;
                    acc = x_fin;
                    acc
                } else {
                    x5
                }
            }
        };

        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { time: self.time + h, detail: "non-finite state".into() });
        }

        self.x.as_mut_slice().copy_from_slice(&next.as_slice()[..n]);
        self.supply.as_mut_slice().copy_from_slice(&next.as_slice()[n..]);
        self.time += h;

        // monitor the junction constraint and project on drift
        let res = self.assembly.junction_residual(&self.x);
        if res.len() > 0 {
            let r = res.amax();
            self.max_manifold = self.max_manifold.max(r);
            if r > MANIFOLD_GUARD {
                self.assembly.project_onto_manifold(&mut self.x);
            }
        }
        Ok(())
    }
}

fn set_model_setpoint(model: &mut SubsystemModel, field: SetpointField, value: f64) {
    match field {
        SetpointField::Flow => model.flow_setpoint = Some(value),
        SetpointField::Pressure => model.pressure_setpoint = Some(value),
    }
}

/// Write a setpoint into the base configuration.
fn set_graph_setpoint(
    graph: &mut NetworkGraph,
    id: SubsystemId,
    field: SetpointField,
    value: f64,
) -> Result<()> {
    match id {
        SubsystemId::Edge(eid) => {
            let rec = graph
                .edge_mut(eid)
                .ok_or_else(|| Error::UnknownSubsystem(format!("edge {eid}")))?;
            match (&mut rec.kind, field) {
                (EdgeKind::Dgu { flow_setpoint, .. }, SetpointField::Flow) => {
                    *flow_setpoint = Some(value)
                }
                (EdgeKind::Dgu { pressure_pump, .. }, SetpointField::Pressure) => {
                    let pp = pressure_pump.as_mut().ok_or_else(|| {
                        Error::Scenario(format!("edge {eid} has no pressure-controlled pump"))
                    })?;
                    pp.setpoint = value;
                }
                (EdgeKind::Consumer { flow_setpoint, .. }, SetpointField::Flow) => {
                    *flow_setpoint = value
                }
                (EdgeKind::Consumer { pressure_pump, .. }, SetpointField::Pressure) => {
                    let pp = pressure_pump.as_mut().ok_or_else(|| {
                        Error::Scenario(format!("edge {eid} has no pressure-controlled pump"))
                    })?;
                    pp.setpoint = value;
                }
                (EdgeKind::Mixing { flow_setpoint, .. }, SetpointField::Flow) => {
                    *flow_setpoint = value
                }
                (EdgeKind::Pipe { booster, .. }, SetpointField::Pressure) => {
                    let pp = booster.as_mut().ok_or_else(|| {
                        Error::Scenario(format!("pipe {eid} has no booster pump"))
                    })?;
                    pp.setpoint = value;
                }
                _ => {
                    return Err(Error::Scenario(format!(
                        "edge {eid} does not accept a {field:?} setpoint"
                    )))
                }
            }
        }
        SubsystemId::Node(nid) => {
            let rec = graph
                .node_mut(nid)
                .ok_or_else(|| Error::UnknownSubsystem(format!("node {nid}")))?;
            match (&mut rec.kind, field) {
                (NodeKind::PressureHolding { pump }, SetpointField::Pressure) => {
                    pump.setpoint = value
                }
                _ => {
                    return Err(Error::Scenario(format!(
                        "node {nid} does not accept a {field:?} setpoint"
                    )))
                }
            }
        }
    }
    Ok(())
}

/// Read the current setpoint value, for ramp starting points.
fn get_setpoint(graph: &NetworkGraph, id: SubsystemId, field: SetpointField) -> Result<f64> {
    match id {
        SubsystemId::Edge(eid) => {
            let rec =
                graph.edge(eid).ok_or_else(|| Error::UnknownSubsystem(format!("edge {eid}")))?;
            let v = match (&rec.kind, field) {
                (EdgeKind::Dgu { flow_setpoint, .. }, SetpointField::Flow) => *flow_setpoint,
                (EdgeKind::Dgu { pressure_pump, .. }, SetpointField::Pressure) => {
                    pressure_pump.as_ref().map(|p| p.setpoint)
                }
                (EdgeKind::Consumer { flow_setpoint, .. }, SetpointField::Flow) => {
                    Some(*flow_setpoint)
                }
                (EdgeKind::Consumer { pressure_pump, .. }, SetpointField::Pressure) => {
                    pressure_pump.as_ref().map(|p| p.setpoint)
                }
                (EdgeKind::Mixing { flow_setpoint, .. }, SetpointField::Flow) => {
                    Some(*flow_setpoint)
                }
                (EdgeKind::Pipe { booster, .. }, SetpointField::Pressure) => {
                    booster.as_ref().map(|p| p.setpoint)
                }
                _ => None,
            };
            v.ok_or_else(|| Error::Scenario(format!("edge {eid} has no {field:?} setpoint")))
        }
        SubsystemId::Node(nid) => {
            let rec =
                graph.node(nid).ok_or_else(|| Error::UnknownSubsystem(format!("node {nid}")))?;
            match &rec.kind {
                NodeKind::PressureHolding { pump } if field == SetpointField::Pressure => {
                    Ok(pump.setpoint)
                }
                _ => Err(Error::Scenario(format!("node {nid} has no {field:?} setpoint"))),
            }
        }
    }
}

/// Multiply pump (R_P, J_P, C_P) and valve C_v parameters by seeded
/// factors 1 + U(-m, m), in deterministic subsystem order.
fn perturb_params(
    graph: &mut NetworkGraph,
    ids: &[SubsystemId],
    magnitude: f64,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = move |rng: &mut ChaCha8Rng| 1.0 + rng.gen_range(-magnitude..magnitude);

    let edge_ids: Vec<u32> = graph.edges().map(|(id, _)| id).collect();
    for eid in edge_ids {
        let selected = ids.is_empty() || ids.contains(&SubsystemId::Edge(eid));
        // draws advance deterministically for every subsystem so that a
        // subset selection does not shift the other factors
        let mut factors = [0.0f64; 4];
        for f in &mut factors {
            *f = draw(&mut rng);
        }
        if !selected {
            continue;
        }
        let rec = graph.edge_mut(eid).unwrap();
        match &mut rec.kind {
            EdgeKind::Dgu { pressure_pump, flow_pump, valve, .. }
            | EdgeKind::Consumer { pressure_pump, flow_pump, valve, .. } => {
                if let Some(pp) = pressure_pump {
                    pp.pump.r_p *= factors[0];
                    pp.pump.j_p *= factors[1];
                    pp.pump.c_p *= factors[2];
                }
                if let Some(fp) = flow_pump {
                    fp.pump.r_p *= factors[0];
                    fp.pump.j_p *= factors[1];
                    fp.pump.c_p *= factors[2];
                }
                valve.c_v *= factors[3];
            }
            EdgeKind::Pipe { booster, .. } => {
                if let Some(pp) = booster {
                    pp.pump.r_p *= factors[0];
                    pp.pump.j_p *= factors[1];
                    pp.pump.c_p *= factors[2];
                }
            }
            EdgeKind::Mixing { valve, .. } => {
                valve.c_v *= factors[3];
            }
        }
    }
    let node_ids: Vec<u32> = graph.nodes().map(|(id, _)| id).collect();
    for nid in node_ids {
        let selected = ids.is_empty() || ids.contains(&SubsystemId::Node(nid));
        let mut factors = [0.0f64; 3];
        for f in &mut factors {
            *f = draw(&mut rng);
        }
        if !selected {
            continue;
        }
        if let NodeKind::PressureHolding { pump } = &mut graph.node_mut(nid).unwrap().kind {
            pump.pump.r_p *= factors[0];
            pump.pump.j_p *= factors[1];
            pump.pump.c_p *= factors[2];
        }
    }
    Ok(())
}

/// Transfer state between layouts after a topology epoch.
fn transfer_state(
    old: &Assembly,
    old_x: &DVector<f64>,
    new: &Assembly,
    parked: &BTreeMap<SubsystemId, Vec<f64>>,
    fresh: &BTreeMap<SubsystemId, Vec<(String, f64)>>,
) -> DVector<f64> {
    let mut x = DVector::zeros(new.n_states());
    for (i, (id, range)) in new.layout.entries().enumerate() {
        if let Some(old_range) = old.layout.range(id) {
            x.as_mut_slice()[range.clone()].copy_from_slice(&old_x.as_slice()[old_range]);
        } else if let Some(p) = parked.get(&id) {
            if p.len() == range.len() {
                x.as_mut_slice()[range.clone()].copy_from_slice(p);
            }
        }
        if let Some(named) = fresh.get(&id) {
            let names = new.models[i].state_names();
            for (name, value) in named {
                if let Some(pos) = names.iter().position(|n| n == name) {
                    x[range.start + pos] = *value;
                }
            }
        }
    }
    x
}

/// Labels of every stateful subsystem of the full graph (junctions
/// excluded), canonical class order, ignoring activity.
fn full_subsystem_list(graph: &NetworkGraph) -> Vec<(SubsystemId, String, SubsystemModel)> {
    let mut edges: Vec<(u32, &EdgeKind)> = graph.edges().map(|(id, r)| (id, &r.kind)).collect();
    edges.sort_by_key(|(id, kind)| (kind.class_rank(), *id));
    let mut out = Vec::new();
    for (id, kind) in edges {
        if let Ok(model) = SubsystemModel::from_edge(kind) {
            out.push((SubsystemId::Edge(id), format!("{}{}", kind.class_name(), id), model));
        }
    }
    let mut nodes: Vec<(u32, &NodeKind)> = graph
        .nodes()
        .filter(|(_, r)| !matches!(r.kind, NodeKind::Junction))
        .map(|(id, r)| (id, &r.kind))
        .collect();
    nodes.sort_by_key(|(id, kind)| (kind.class_rank(), *id));
    for (id, kind) in nodes {
        if let Ok(model) = SubsystemModel::from_node(kind) {
            out.push((SubsystemId::Node(id), format!("{}{}", kind.class_name(), id), model));
        }
    }
    out
}

/// Execute a scenario over a network and record the trajectory.
pub fn run(graph: &NetworkGraph, scenario: &Scenario, config: &RunConfig) -> Result<TrajectoryRecord> {
    scenario.validate()?;
    let wall = Instant::now();

    let mut scenario = scenario.clone();
    if let Some(sat) = config.saturation_override {
        scenario.saturation = sat;
    }
    if let Some(fr) = config.from_rest_override {
        scenario.from_rest = fr;
    }

    let report = validate_network(graph);
    if !report.passed {
        return Err(Error::Validation(report.to_string()));
    }

    // initial state: equilibrium of the base (unsaturated) configuration,
    // or a cold start from rest
    let base = Assembly::new(graph.clone(), false)?;
    let x0 = if scenario.from_rest {
        from_rest_state(&base)
    } else {
        solve_equilibrium(&base, None, &EquilibriumOptions::default())?.x
    };

    let assembly = Assembly::new(graph.clone(), scenario.saturation)?;
    let n_sub = assembly.n_subsystems();
    let mut engine = Engine {
        x: x0,
        assembly,
        time: 0.0,
        parked: BTreeMap::new(),
        ramps: Vec::new(),
        specs: None,
        refs: None,
        supply: DVector::zeros(n_sub),
        max_power_rel: 0.0,
        max_manifold: 0.0,
        saturated_any: false,
    };

    // channel table over the full network
    let full_list = full_subsystem_list(graph);
    let junctions: Vec<u32> = graph
        .nodes()
        .filter(|(_, r)| matches!(r.kind, NodeKind::Junction))
        .map(|(id, _)| id)
        .collect();
    let mut table = ChannelTable::new();
    for (_, label, model) in &full_list {
        let is_edge = model.is_edge();
        for name in model.state_names() {
            let unit = match *name {
                "q" | "q_pump" => "m3_per_s",
                "p" | "p_pump" => "Pa",
                _ => "1",
            };
            table.add(format!("{label}.{name}"), unit);
        }
        table.add(format!("{label}.d"), if is_edge { "Pa" } else { "m3_per_s" });
        table.add(format!("{label}.z"), if is_edge { "m3_per_s" } else { "Pa" });
        if model.pump.is_some() {
            table.add(format!("{label}.u_p"), "Pa");
        }
        if model.valve.is_some() && !matches!(model.kind, LoopKind::PlainPipe) {
            table.add(format!("{label}.u_v"), "1");
            table.add(format!("{label}.u_v_raw"), "1");
            table.add(format!("{label}.stem"), "1");
        }
        if model.flow_setpoint.is_some() {
            table.add(format!("{label}.q_set"), "m3_per_s");
        }
        if model.pressure_setpoint.is_some() {
            table.add(format!("{label}.p_set"), "Pa");
        }
        table.add(format!("{label}.h"), "J");
        table.add(format!("{label}.psi"), "W");
        table.add(format!("{label}.supply_int"), "J");
    }
    for j in &junctions {
        table.add(format!("junc{j}.p"), "Pa");
    }
    table.add("power_residual_rel".into(), "1");
    table.add("manifold_residual".into(), "m3_per_s");
    table.add("lyapunov_v".into(), "J");

    let mut times: Vec<f64> = Vec::new();
    let mut segment_of: Vec<usize> = Vec::new();
    let mut segments: Vec<SegmentInfo> = Vec::new();
    let mut events_applied: Vec<(f64, String)> = Vec::new();
    let mut saturation_hits: BTreeMap<String, f64> = BTreeMap::new();
    let mut aborted: Option<String> = None;

    // boundaries: event times, ramp ends, t_end
    let mut boundaries: Vec<f64> = scenario.events.iter().map(|e| e.time).collect();
    boundaries.push(scenario.t_end);

    // apply t = 0 events before the first sample
    let mut event_cursor = 0usize;
    apply_events_at(
        &mut engine,
        &mut event_cursor,
        &scenario,
        0.0,
        &mut boundaries,
        &mut events_applied,
    )?;
    engine.apply_ramps(0.0);
    start_segment(&mut engine, &mut segments, 0.0);

    sample(
        &mut engine,
        &mut table,
        &full_list,
        &junctions,
        &mut times,
        &mut segment_of,
        segments.len() - 1,
        &mut saturation_hits,
    )?;

    'outer: while engine.time < scenario.t_end - 1e-12 {
        let t_next = boundaries
            .iter()
            .copied()
            .filter(|t| *t > engine.time + 1e-12)
            .fold(scenario.t_end, f64::min);
        let mut steps_since_sample = 0usize;
        while engine.time < t_next - 1e-12 {
            let h = scenario.dt.min(t_next - engine.time);
            engine.apply_ramps(engine.time);
            if let Err(e) = engine.step(h, scenario.integrator) {
                aborted = Some(e.to_string());
                break 'outer;
            }
            // track power balance at the sampled state cheaply
            steps_since_sample += 1;
            if steps_since_sample >= scenario.stride && engine.time < t_next - 1e-12 {
                steps_since_sample = 0;
                sample(
                    &mut engine,
                    &mut table,
                    &full_list,
                    &junctions,
                    &mut times,
                    &mut segment_of,
                    segments.len() - 1,
                    &mut saturation_hits,
                )?;
            }
        }
        if let Some(seg) = segments.last_mut() {
            seg.t_end = engine.time;
        }
        if engine.time >= scenario.t_end - 1e-12 {
            sample(
                &mut engine,
                &mut table,
                &full_list,
                &junctions,
                &mut times,
                &mut segment_of,
                segments.len() - 1,
                &mut saturation_hits,
            )?;
            break;
        }
        // boundary: apply events, finish ramps, open a new segment
        let t_now = engine.time;
        apply_events_at(
            &mut engine,
            &mut event_cursor,
            &scenario,
            t_now,
            &mut boundaries,
            &mut events_applied,
        )?;
        finish_ramps(&mut engine);
        engine.apply_ramps(t_now);
        start_segment(&mut engine, &mut segments, t_now);
        sample(
            &mut engine,
            &mut table,
            &full_list,
            &junctions,
            &mut times,
            &mut segment_of,
            segments.len() - 1,
            &mut saturation_hits,
        )?;
    }
    if let Some(seg) = segments.last_mut() {
        seg.t_end = engine.time;
    }

    let channels = table
        .names
        .iter()
        .zip(table.units.iter())
        .enumerate()
        .map(|(i, (name, unit))| Channel {
            name: name.clone(),
            unit: unit.clone(),
            values: table.rows.iter().map(|r| r[i]).collect(),
        })
        .collect();

    Ok(TrajectoryRecord {
        meta: RunMeta {
            network: config.network_name.clone(),
            scenario: config.scenario_name.clone(),
            dt: scenario.dt,
            integrator: match scenario.integrator {
                Integrator::Rk4 => "rk4".into(),
                Integrator::Rk45 { .. } => "rk45".into(),
            },
            stride: scenario.stride,
            seed: config.seed,
        },
        times,
        channels,
        segments,
        segment_of,
        subsystems: full_list.iter().map(|(_, l, _)| l.clone()).collect(),
        events_applied,
        saturation_hits: saturation_hits.into_iter().collect(),
        max_power_residual_rel: engine.max_power_rel,
        max_manifold_residual: engine.max_manifold,
        aborted,
        runtime_ms: wall.elapsed().as_secs_f64() * 1e3,
    })
}

fn from_rest_state(assembly: &Assembly) -> DVector<f64> {
    let mut x = DVector::zeros(assembly.n_states());
    // hold every node at the anchor pressure, everything else at zero
    let anchor = assembly
        .models
        .iter()
        .find(|m| matches!(m.kind, LoopKind::Holding))
        .and_then(|m| m.pressure_setpoint)
        .unwrap_or(1e5);
    for (i, model) in assembly.models.iter().enumerate() {
        let range = assembly.layout.entries().nth(i).unwrap().1;
        match model.kind {
            LoopKind::Capacitive => x[range.start] = anchor,
            LoopKind::Holding => x[range.start + 1] = anchor,
            _ => {}
        }
    }
    x
}

fn start_segment(engine: &mut Engine, segments: &mut Vec<SegmentInfo>, t: f64) {
    let ramp = !engine.ramps.is_empty();
    let refs = compute_segment_refs(engine);
    let (specs, refs_info, solution) = match refs {
        Some(sol) => {
            let specs = sol.storage_specs(&engine.assembly);
            let mut info = SegmentRefs::default();
            for spec in &specs {
                info.xbar.insert(spec.label.clone(), spec.xbar.clone());
                info.dbar.insert(spec.label.clone(), spec.dbar);
                info.zbar.insert(spec.label.clone(), spec.zbar);
            }
            (Some(specs), Some(info), Some(sol))
        }
        None => (None, None, None),
    };
    engine.specs = specs;
    engine.refs = solution;
    engine.supply = DVector::zeros(engine.assembly.n_subsystems());
    segments.push(SegmentInfo {
        index: segments.len(),
        t_start: t,
        t_end: t,
        ramp,
        refs: refs_info,
    });
}

/// Equilibrium reference of the current configuration; ramp segments use
/// the end-of-ramp setpoints. Saturated valves pegged at a bound are held
/// there during the solve.
fn compute_segment_refs(engine: &Engine) -> Option<EquilibriumSolution> {
    let mut assembly = engine.assembly.clone();
    for ramp in &engine.ramps {
        if let Some(idx) = assembly.ids.iter().position(|id| *id == ramp.id) {
            set_model_setpoint(&mut assembly.models[idx], ramp.field, ramp.to);
        }
    }
    let opts = EquilibriumOptions {
        respect_saturation: true,
        check_targets: false,
        ..Default::default()
    };
    solve_equilibrium(&assembly, Some(&engine.x), &opts)
        .or_else(|_| solve_equilibrium(&assembly, None, &opts))
        .ok()
}

fn finish_ramps(engine: &mut Engine) {
    let t = engine.time;
    let done: Vec<ActiveRamp> =
        engine.ramps.iter().filter(|r| r.t1 <= t + 1e-12).cloned().collect();
    engine.ramps.retain(|r| r.t1 > t + 1e-12);
    for ramp in done {
        let _ = set_graph_setpoint(&mut engine.assembly.graph, ramp.id, ramp.field, ramp.to);
        if let Some(idx) = engine.assembly.ids.iter().position(|id| *id == ramp.id) {
            set_model_setpoint(&mut engine.assembly.models[idx], ramp.field, ramp.to);
        }
    }
}

fn apply_events_at(
    engine: &mut Engine,
    cursor: &mut usize,
    scenario: &Scenario,
    t: f64,
    boundaries: &mut Vec<f64>,
    applied: &mut Vec<(f64, String)>,
) -> Result<()> {
    while *cursor < scenario.events.len() && scenario.events[*cursor].time <= t + 1e-12 {
        let event = scenario.events[*cursor].clone();
        *cursor += 1;
        if event.time < t - 1e-12 {
            continue;
        }
        apply_event(engine, &event.action, boundaries, t)?;
        applied.push((t, describe_event(&event.action)));
    }
    Ok(())
}

fn describe_event(action: &EventAction) -> String {
    match action {
        EventAction::Connect { id, .. } => format!("connect {id}"),
        EventAction::Disconnect { id } => format!("disconnect {id}"),
        EventAction::SetpointStep { id, field, value } => {
            format!("setpoint {id} {field:?} -> {}", format_float(*value))
        }
        EventAction::SetpointRamp { id, field, value, duration } => {
            format!("ramp {id} {field:?} -> {} over {duration} s", format_float(*value))
        }
        EventAction::PerturbParams { magnitude, seed, .. } => {
            format!("perturb params by {magnitude} (seed {seed})")
        }
        EventAction::Saturation { on } => format!("saturation {}", if *on { "on" } else { "off" }),
    }
}

/// Apply one event: topology changes re-validate, re-partition, re-factor
/// the junction system and re-project the state onto the new manifold.
pub fn apply_event(
    engine: &mut Engine,
    action: &EventAction,
    boundaries: &mut Vec<f64>,
    t: f64,
) -> Result<()> {
    match action {
        EventAction::Connect { id, state } => {
            let mut graph = engine.assembly.graph.clone();
            set_active(&mut graph, *id, true)?;
            let report = validate_network(&graph);
            if !report.passed {
                return Err(Error::Validation(format!("connect {id} rejected:\n{report}")));
            }
            let new_assembly = Assembly::new(graph, engine.assembly.saturation_on)?;
            let mut fresh = BTreeMap::new();
            if let Some(named) = state {
                fresh.insert(*id, named.clone());
            }
            let mut x =
                transfer_state(&engine.assembly, &engine.x, &new_assembly, &engine.parked, &fresh);
            new_assembly.project_onto_manifold(&mut x);
            engine.parked.remove(id);
            engine.assembly = new_assembly;
            engine.x = x;
        }
        EventAction::Disconnect { id } => {
            let mut graph = engine.assembly.graph.clone();
            set_active(&mut graph, *id, false)?;
            let report = validate_network(&graph);
            if !report.passed {
                return Err(Error::Validation(format!("disconnect {id} rejected:\n{report}")));
            }
            if let Some(range) = engine.assembly.layout.range(*id) {
                engine.parked.insert(*id, engine.x.as_slice()[range].to_vec());
            }
            let new_assembly = Assembly::new(graph, engine.assembly.saturation_on)?;
            let mut x = transfer_state(
                &engine.assembly,
                &engine.x,
                &new_assembly,
                &engine.parked,
                &BTreeMap::new(),
            );
            new_assembly.project_onto_manifold(&mut x);
            engine.assembly = new_assembly;
            engine.x = x;
        }
        EventAction::SetpointStep { id, field, value } => {
            set_graph_setpoint(&mut engine.assembly.graph, *id, *field, *value)?;
            if let Some(idx) = engine.assembly.ids.iter().position(|i| i == id) {
                set_model_setpoint(&mut engine.assembly.models[idx], *field, *value);
            }
        }
        EventAction::SetpointRamp { id, field, value, duration } => {
            let from = get_setpoint(&engine.assembly.graph, *id, *field)?;
            engine.ramps.push(ActiveRamp {
                id: *id,
                field: *field,
                from,
                to: *value,
                t0: t,
                t1: t + duration,
            });
            boundaries.push(t + duration);
        }
        EventAction::PerturbParams { ids, magnitude, seed } => {
            let mut graph = engine.assembly.graph.clone();
            perturb_params(&mut graph, ids, *magnitude, *seed)?;
            let report = validate_network(&graph);
            if !report.passed {
                return Err(Error::Validation(format!("perturbation rejected:\n{report}")));
            }
            let new_assembly = Assembly::new(graph, engine.assembly.saturation_on)?;
            let x = transfer_state(
                &engine.assembly,
                &engine.x,
                &new_assembly,
                &engine.parked,
                &BTreeMap::new(),
            );
            engine.assembly = new_assembly;
            engine.x = x;
        }
        EventAction::Saturation { on } => {
            engine.assembly.saturation_on = *on;
        }
    }
    Ok(())
}

fn set_active(graph: &mut NetworkGraph, id: SubsystemId, active: bool) -> Result<()> {
    match id {
        SubsystemId::Edge(e) => graph.set_edge_active(e, active),
        SubsystemId::Node(n) => graph.set_node_active(n, active),
    }
}

#[allow(clippy::too_many_arguments)]
fn sample(
    engine: &mut Engine,
    table: &mut ChannelTable,
    full_list: &[(SubsystemId, String, SubsystemModel)],
    junctions: &[u32],
    times: &mut Vec<f64>,
    segment_of: &mut Vec<usize>,
    segment: usize,
    saturation_hits: &mut BTreeMap<String, f64>,
) -> Result<()> {
    let n = engine.assembly.n_states();
    let mut dx = DVector::zeros(n);
    let mut ports = PortData::default();
    let diag = engine.assembly.vector_field(&engine.x, &mut dx, Some(&mut ports))?;
    if diag.power_abs > 0.0 {
        engine.max_power_rel = engine.max_power_rel.max(diag.power_sum.abs() / diag.power_abs);
    }

    let time = engine.time;
    times.push(time);
    segment_of.push(segment);

    let index = table.index.clone();
    let row = table.row();

    let mut v_total = 0.0;
    let mut v_valid = engine.specs.is_some();

    for (pos, (id, label, _)) in full_list.iter().enumerate() {
        let _ = pos;
        let Some(active_idx) = engine.assembly.ids.iter().position(|i| i == id) else {
            continue;
        };
        let range = engine.assembly.layout.entries().nth(active_idx).unwrap().1;
        let xs = &engine.x.as_slice()[range.clone()];
        let model = &engine.assembly.models[active_idx];
        for (k, name) in model.state_names().iter().enumerate() {
            ChannelTable::set(row, &index, &format!("{label}.{name}"), xs[k]);
        }
        ChannelTable::set(row, &index, &format!("{label}.d"), ports.d[active_idx]);
        ChannelTable::set(row, &index, &format!("{label}.z"), ports.z[active_idx]);
        let io = &ports.io[active_idx];
        if let Some(u_p) = io.u_p {
            ChannelTable::set(row, &index, &format!("{label}.u_p"), u_p);
        }
        if let Some(u_v) = io.u_v {
            ChannelTable::set(row, &index, &format!("{label}.u_v"), u_v);
            ChannelTable::set(row, &index, &format!("{label}.u_v_raw"), io.u_v_raw.unwrap_or(u_v));
            if let Some(valve) = &model.valve {
                let clamped = u_v.clamp(1.0, valve.u_v_max());
                if let Ok(stem) = crate::components::stem_from_input(valve, clamped) {
                    ChannelTable::set(row, &index, &format!("{label}.stem"), stem);
                }
            }
        }
        if io.saturated {
            saturation_hits.entry(label.clone()).or_insert(time);
            engine.saturated_any = true;
        }
        if let Some(q_set) = model.flow_setpoint {
            ChannelTable::set(row, &index, &format!("{label}.q_set"), q_set);
        }
        if let Some(p_set) = model.pressure_setpoint {
            ChannelTable::set(row, &index, &format!("{label}.p_set"), p_set);
        }
        if let Some(specs) = &engine.specs {
            let spec = &specs[active_idx];
            let h = spec.value(xs);
            let psi = spec.dissipation(xs);
            ChannelTable::set(row, &index, &format!("{label}.h"), h);
            ChannelTable::set(row, &index, &format!("{label}.psi"), psi);
            ChannelTable::set(
                row,
                &index,
                &format!("{label}.supply_int"),
                engine.supply[active_idx],
            );
            v_total += h;
        } else {
            v_valid = false;
        }
    }

    for (k, j) in junctions.iter().enumerate() {
        if let Some(pos) =
            engine.assembly.incidence.junction_nodes.iter().position(|n| n == j)
        {
            let _ = k;
            ChannelTable::set(row, &index, &format!("junc{j}.p"), ports.z_k[pos]);
        }
    }

    let power_rel =
        if diag.power_abs > 0.0 { diag.power_sum.abs() / diag.power_abs } else { 0.0 };
    ChannelTable::set(row, &index, "power_residual_rel", power_rel);
    let manifold = engine.assembly.junction_residual(&engine.x);
    let manifold_res = if manifold.len() > 0 { manifold.amax() } else { 0.0 };
    ChannelTable::set(row, &index, "manifold_residual", manifold_res);
    if v_valid {
        ChannelTable::set(row, &index, "lyapunov_v", v_total);
    }
    Ok(())
}

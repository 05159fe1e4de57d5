//! DHN digraph: typed nodes and edges, activity flags, hydraulic-layer
//! detection, operating-mode validation and the incidence partition used
//! by the simulation engine.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::components::{PipeHydraulics, PumpParams, ValveParams};
use crate::control::{PumpFlowGains, PumpPressureGains, ValveFlowGains};
use crate::error::{Error, Result};

pub type NodeId = u32;
pub type EdgeId = u32;

/// Any subsystem of the network, edge or node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubsystemId {
    Edge(EdgeId),
    Node(NodeId),
}

impl std::fmt::Display for SubsystemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubsystemId::Edge(i) => write!(f, "edge {i}"),
            SubsystemId::Node(i) => write!(f, "node {i}"),
        }
    }
}

/// DGU operating modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DguMode {
    /// Grid-forming: regulate pump differential pressure, valve fully open.
    Form,
    /// Grid-feeding via the control valve; the pump holds a pressure setpoint.
    Valve,
    /// Grid-feeding via the pump with the valve fully open.
    Vsp,
}

/// Consumer operating modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsumerMode {
    /// Booster pump (pressure-controlled) plus flow-controlling valve.
    Boost,
    /// Valve-only flow control, no pump.
    Valve,
    /// Pump flow control with the valve fully open.
    Vsp,
}

/// Pressure-controlled pump bundle (params + controller gains + setpoint).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressurePump {
    pub pump: PumpParams,
    pub gains: PumpPressureGains,
    /// Setpoint p*_P in Pa.
    pub setpoint: f64,
}

/// Flow-controlled pump bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowPump {
    pub pump: PumpParams,
    pub gains: PumpFlowGains,
}

/// Flow-controlling valve bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowValve {
    pub valve: ValveParams,
    pub gains: ValveFlowGains,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EdgeKind {
    Dgu {
        mode: DguMode,
        pipe: PipeHydraulics,
        valve: ValveParams,
        /// Pressure pump for Form/Valve, flow pump for Vsp.
        pressure_pump: Option<PressurePump>,
        flow_pump: Option<FlowPump>,
        valve_gains: Option<ValveFlowGains>,
        /// Flow setpoint q* in m³/s (Valve and Vsp modes).
        flow_setpoint: Option<f64>,
    },
    Consumer {
        mode: ConsumerMode,
        pipe: PipeHydraulics,
        valve: ValveParams,
        pressure_pump: Option<PressurePump>,
        flow_pump: Option<FlowPump>,
        valve_gains: Option<ValveFlowGains>,
        flow_setpoint: f64,
    },
    Pipe {
        pipe: PipeHydraulics,
        booster: Option<PressurePump>,
    },
    Mixing {
        pipe: PipeHydraulics,
        valve: ValveParams,
        valve_gains: ValveFlowGains,
        flow_setpoint: f64,
    },
}

impl EdgeKind {
    pub fn pipe(&self) -> &PipeHydraulics {
        match self {
            EdgeKind::Dgu { pipe, .. }
            | EdgeKind::Consumer { pipe, .. }
            | EdgeKind::Pipe { pipe, .. }
            | EdgeKind::Mixing { pipe, .. } => pipe,
        }
    }

    pub fn is_pipe(&self) -> bool {
        matches!(self, EdgeKind::Pipe { .. })
    }

    /// Ordering class: DGUs, consumers, pipes, mixing connections.
    pub fn class_rank(&self) -> u8 {
        match self {
            EdgeKind::Dgu { .. } => 0,
            EdgeKind::Consumer { .. } => 1,
            EdgeKind::Pipe { .. } => 2,
            EdgeKind::Mixing { .. } => 3,
        }
    }

    pub fn class_name(&self) -> &'static str {
        match self {
            EdgeKind::Dgu { .. } => "dgu",
            EdgeKind::Consumer { .. } => "cons",
            EdgeKind::Pipe { .. } => "pipe",
            EdgeKind::Mixing { .. } => "mix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    PressureHolding { pump: PressurePump },
    Capacitive { capacitance: f64 },
    Junction,
}

impl NodeKind {
    /// Ordering class: holding, capacitive, junction.
    pub fn class_rank(&self) -> u8 {
        match self {
            NodeKind::PressureHolding { .. } => 0,
            NodeKind::Capacitive { .. } => 1,
            NodeKind::Junction => 2,
        }
    }

    pub fn class_name(&self) -> &'static str {
        match self {
            NodeKind::PressureHolding { .. } => "hold",
            NodeKind::Capacitive { .. } => "cap",
            NodeKind::Junction => "junc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub kind: NodeKind,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub kind: EdgeKind,
    pub source: NodeId,
    pub target: NodeId,
    pub active: bool,
}

/// Typed digraph of the DHN with plug-and-play activity flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub name: String,
    nodes: BTreeMap<NodeId, NodeRecord>,
    edges: BTreeMap<EdgeId, EdgeRecord>,
}

impl NetworkGraph {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), nodes: BTreeMap::new(), edges: BTreeMap::new() }
    }

    pub fn add_node(&mut self, id: NodeId, kind: NodeKind) -> Result<()> {
        if self.nodes.contains_key(&id) {
            return Err(Error::DuplicateId(format!("node {id}")));
        }
        self.nodes.insert(id, NodeRecord { kind, active: true });
        Ok(())
    }

    pub fn add_edge(&mut self, id: EdgeId, source: NodeId, target: NodeId, kind: EdgeKind) -> Result<()> {
        if self.edges.contains_key(&id) {
            return Err(Error::DuplicateId(format!("edge {id}")));
        }
        if source == target {
            return Err(Error::SelfLoop(id));
        }
        for n in [source, target] {
            if !self.nodes.contains_key(&n) {
                return Err(Error::DanglingEdge { edge: id, node: n });
            }
        }
        self.edges.insert(id, EdgeRecord { kind, source, target, active: true });
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeRecord> {
        self.nodes.get(&id)
    }

    pub fn edge(&self, id: EdgeId) -> Option<&EdgeRecord> {
        self.edges.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeRecord> {
        self.nodes.get_mut(&id)
    }

    pub fn edge_mut(&mut self, id: EdgeId) -> Option<&mut EdgeRecord> {
        self.edges.get_mut(&id)
    }

    /// All nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &NodeRecord)> {
        self.nodes.iter().map(|(id, rec)| (*id, rec))
    }

    /// All edges in ascending id order.
    pub fn edges(&self) -> impl Iterator<Item = (EdgeId, &EdgeRecord)> {
        self.edges.iter().map(|(id, rec)| (*id, rec))
    }

    /// Active nodes in the canonical order: holding, capacitive, junction,
    /// ascending id within each class.
    pub fn active_nodes_ordered(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.nodes.iter().filter(|(_, r)| r.active).map(|(id, _)| *id).collect();
        ids.sort_by_key(|id| (self.nodes[id].kind.class_rank(), *id));
        ids
    }

    /// Active edges in the canonical order: DGU, consumer, pipe, mixing,
    /// ascending id within each class. Edges incident to inactive nodes
    /// are excluded.
    pub fn active_edges_ordered(&self) -> Vec<EdgeId> {
        let mut ids: Vec<EdgeId> = self
            .edges
            .iter()
            .filter(|(_, r)| r.active && self.node_active(r.source) && self.node_active(r.target))
            .map(|(id, _)| *id)
            .collect();
        ids.sort_by_key(|id| (self.edges[id].kind.class_rank(), *id));
        ids
    }

    fn node_active(&self, id: NodeId) -> bool {
        self.nodes.get(&id).map(|r| r.active).unwrap_or(false)
    }

    pub fn set_edge_active(&mut self, id: EdgeId, active: bool) -> Result<()> {
        self.edges
            .get_mut(&id)
            .map(|r| r.active = active)
            .ok_or(Error::UnknownSubsystem(format!("edge {id}")))
    }

    pub fn set_node_active(&mut self, id: NodeId, active: bool) -> Result<()> {
        self.nodes
            .get_mut(&id)
            .map(|r| r.active = active)
            .ok_or(Error::UnknownSubsystem(format!("node {id}")))
    }

    fn active_adjacency(&self) -> BTreeMap<NodeId, Vec<(EdgeId, NodeId)>> {
        let mut adj: BTreeMap<NodeId, Vec<(EdgeId, NodeId)>> = BTreeMap::new();
        for (id, rec) in self.nodes.iter() {
            if rec.active {
                adj.insert(*id, Vec::new());
            }
        }
        for id in self.active_edges_ordered() {
            let rec = &self.edges[&id];
            adj.get_mut(&rec.source).unwrap().push((id, rec.target));
            adj.get_mut(&rec.target).unwrap().push((id, rec.source));
        }
        for neighbors in adj.values_mut() {
            neighbors.sort();
        }
        adj
    }

    /// Whether the active subgraph is weakly connected.
    pub fn weakly_connected(&self) -> bool {
        let adj = self.active_adjacency();
        let Some(start) = adj.keys().next().copied() else { return false };
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some(n) = queue.pop_front() {
            for &(_, m) in &adj[&n] {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen.len() == adj.len()
    }
}

/// Hydraulic layer assignment: connected components of the active
/// pipes-only subgraph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HydraulicLayers {
    /// Layer index per active node.
    pub layer_of: BTreeMap<NodeId, usize>,
    /// Number of layers.
    pub count: usize,
}

/// Connected components after removing every non-pipe edge.
pub fn compute_hydraulic_layers(graph: &NetworkGraph) -> Result<HydraulicLayers> {
    let node_ids: Vec<NodeId> = graph.nodes().filter(|(_, r)| r.active).map(|(id, _)| id).collect();
    if node_ids.is_empty() {
        return Err(Error::NoNodes);
    }
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = node_ids.iter().map(|&n| (n, Vec::new())).collect();
    for id in graph.active_edges_ordered() {
        let rec = graph.edge(id).unwrap();
        if rec.kind.is_pipe() {
            adj.get_mut(&rec.source).unwrap().push(rec.target);
            adj.get_mut(&rec.target).unwrap().push(rec.source);
        }
    }
    let mut layer_of = BTreeMap::new();
    let mut count = 0;
    for &start in &node_ids {
        if layer_of.contains_key(&start) {
            continue;
        }
        let layer = count;
        count += 1;
        let mut queue = VecDeque::from([start]);
        layer_of.insert(start, layer);
        while let Some(n) = queue.pop_front() {
            for &m in &adj[&n] {
                if !layer_of.contains_key(&m) {
                    layer_of.insert(m, layer);
                    queue.push_back(m);
                }
            }
        }
    }
    Ok(HydraulicLayers { layer_of, count })
}

/// One validation condition outcome.
#[derive(Debug, Clone, Serialize)]
pub struct Condition {
    pub code: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Result of `validate_network`: failed conditions are report entries,
/// not errors.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub conditions: Vec<Condition>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| !c.passed)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "validation: {}", if self.passed { "PASS" } else { "FAIL" })?;
        for c in &self.conditions {
            writeln!(f, "  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.code, c.detail)?;
        }
        for w in &self.warnings {
            writeln!(f, "  [warn] {w}")?;
        }
        Ok(())
    }
}

/// Check the operating-mode feasibility conditions on the active subgraph.
pub fn validate_network(graph: &NetworkGraph) -> ValidationReport {
    let mut conditions = Vec::new();
    let mut warnings = Vec::new();

    let connected = graph.weakly_connected();
    conditions.push(Condition {
        code: "connected",
        passed: connected,
        detail: "active subgraph weakly connected".into(),
    });

    let layers = compute_hydraulic_layers(graph);
    let layer_detail;
    let mut layer_map = None;
    match &layers {
        Ok(l) => {
            layer_detail = format!("{} hydraulic layer(s), expected exactly 2", l.count);
            layer_map = Some(l);
        }
        Err(e) => layer_detail = format!("layer computation failed: {e}"),
    }
    let two_layers = layer_map.map(|l| l.count == 2).unwrap_or(false);
    conditions.push(Condition { code: "two_layers", passed: two_layers, detail: layer_detail });

    // at least one grid-forming DGU bridging distinct layers
    let mut has_bridging_form = false;
    for id in graph.active_edges_ordered() {
        let rec = graph.edge(id).unwrap();
        if let EdgeKind::Dgu { mode: DguMode::Form, .. } = rec.kind {
            if let Some(l) = layer_map {
                if l.layer_of.get(&rec.source) != l.layer_of.get(&rec.target) {
                    has_bridging_form = true;
                }
            }
        }
    }
    conditions.push(Condition {
        code: "forming_dgu",
        passed: has_bridging_form,
        detail: "at least one grid-forming DGU connects the two hydraulic layers".into(),
    });

    let (mut d, mut l, mut p, mut m) = (0usize, 0usize, 0usize, 0usize);
    for id in graph.active_edges_ordered() {
        match graph.edge(id).unwrap().kind {
            EdgeKind::Dgu { .. } => d += 1,
            EdgeKind::Consumer { .. } => l += 1,
            EdgeKind::Pipe { .. } => p += 1,
            EdgeKind::Mixing { .. } => m += 1,
        }
    }
    let counts_ok = d >= 1 && l >= 1 && p >= 2;
    conditions.push(Condition {
        code: "counts",
        passed: counts_ok,
        detail: format!("D = {d} (>= 1), L = {l} (>= 1), P = {p} (>= 2), M = {m}"),
    });

    // pump-flow gain condition, checked at build time
    let mut gain_ok = true;
    let mut gain_detail = String::from("all pump-flow controllers satisfy the gain condition");
    for id in graph.active_edges_ordered() {
        let rec = graph.edge(id).unwrap();
        let flow_pump = match &rec.kind {
            EdgeKind::Dgu { flow_pump, .. } | EdgeKind::Consumer { flow_pump, .. } => flow_pump,
            _ => &None,
        };
        if let Some(fp) = flow_pump {
            let kappa = fp.gains.kappa(fp.pump.c_p);
            if kappa <= 0.0 {
                gain_ok = false;
                gain_detail = format!("edge {id}: Q_I(K_P + 1) - C_P = {kappa} <= 0");
            }
        }
    }
    conditions.push(Condition { code: "pump_flow_gains", passed: gain_ok, detail: gain_detail });

    // consumer Valve mode must not carry a pump
    let mut modes_ok = true;
    let mut modes_detail = String::from("subsystem mode configurations consistent");
    for id in graph.active_edges_ordered() {
        let rec = graph.edge(id).unwrap();
        if let EdgeKind::Consumer { mode: ConsumerMode::Valve, pressure_pump, flow_pump, .. } = &rec.kind {
            if pressure_pump.is_some() || flow_pump.is_some() {
                modes_ok = false;
                modes_detail = format!("consumer {id} in valve mode must not have a pump");
            }
        }
    }
    conditions.push(Condition { code: "modes", passed: modes_ok, detail: modes_detail });

    // footnote check: DGUs and consumers sharing a node is only a warning
    let mut endpoint_users: BTreeMap<NodeId, Vec<EdgeId>> = BTreeMap::new();
    for id in graph.active_edges_ordered() {
        let rec = graph.edge(id).unwrap();
        if matches!(rec.kind, EdgeKind::Dgu { .. } | EdgeKind::Consumer { .. }) {
            endpoint_users.entry(rec.source).or_default().push(id);
            endpoint_users.entry(rec.target).or_default().push(id);
        }
    }
    for (node, users) in endpoint_users {
        if users.len() > 1 {
            warnings.push(format!("DGU/consumer edges {users:?} share node {node}"));
        }
    }

    let passed = conditions.iter().all(|c| c.passed);
    ValidationReport { passed, conditions, warnings }
}

/// Chords of the canonical spanning tree: the independent steady-state
/// flow variables. The tree is a BFS over pipe edges from the lowest
/// active node id per pipe component, bridged by the lowest-id
/// grid-forming DGU; all remaining edges are chords.
pub fn independent_flow_edges(graph: &NetworkGraph) -> Result<BTreeSet<EdgeId>> {
    let report = validate_network(graph);
    if !report.passed {
        return Err(Error::Validation(report.to_string()));
    }
    let edges = graph.active_edges_ordered();
    let mut tree: BTreeSet<EdgeId> = BTreeSet::new();
    let mut visited: BTreeSet<NodeId> = BTreeSet::new();

    // pipe adjacency
    let mut pipe_adj: BTreeMap<NodeId, Vec<(EdgeId, NodeId)>> = BTreeMap::new();
    for (id, rec) in graph.nodes() {
        if rec.active {
            pipe_adj.insert(id, Vec::new());
        }
    }
    for &id in &edges {
        let rec = graph.edge(id).unwrap();
        if rec.kind.is_pipe() {
            pipe_adj.get_mut(&rec.source).unwrap().push((id, rec.target));
            pipe_adj.get_mut(&rec.target).unwrap().push((id, rec.source));
        }
    }
    for nbrs in pipe_adj.values_mut() {
        nbrs.sort();
    }

    let node_ids: Vec<NodeId> = pipe_adj.keys().copied().collect();
    for &root in &node_ids {
        if visited.contains(&root) {
            continue;
        }
        visited.insert(root);
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            for &(eid, m) in &pipe_adj[&n] {
                if visited.insert(m) {
                    tree.insert(eid);
                    queue.push_back(m);
                }
            }
        }
    }

    // bridge the two pipe components with the lowest-id bridging grid-forming DGU
    let layers = compute_hydraulic_layers(graph)?;
    for &id in &edges {
        let rec = graph.edge(id).unwrap();
        if let EdgeKind::Dgu { mode: DguMode::Form, .. } = rec.kind {
            if layers.layer_of[&rec.source] != layers.layer_of[&rec.target] {
                tree.insert(id);
                break;
            }
        }
    }

    Ok(edges.iter().copied().filter(|id| !tree.contains(id)).collect())
}

/// Signed incidence blocks of the active subgraph: +1 at the target row,
/// -1 at the source row of each edge column. Rows of `b_delta` run over
/// holding then capacitive nodes, rows of `b_k` over junctions; columns
/// follow the canonical edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidencePartition {
    pub b_delta: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub edge_order: Vec<EdgeId>,
    /// Holding and capacitive nodes, canonical order.
    pub delta_nodes: Vec<NodeId>,
    /// Junction nodes, ascending id.
    pub junction_nodes: Vec<NodeId>,
}

/// Build the incidence partition of the active subgraph.
pub fn partition_incidence(graph: &NetworkGraph) -> Result<IncidencePartition> {
    let node_order = graph.active_nodes_ordered();
    if node_order.is_empty() {
        return Err(Error::NoNodes);
    }
    let edge_order = graph.active_edges_ordered();

    let mut delta_nodes = Vec::new();
    let mut junction_nodes = Vec::new();
    for &n in &node_order {
        match graph.node(n).unwrap().kind {
            NodeKind::Junction => junction_nodes.push(n),
            _ => delta_nodes.push(n),
        }
    }
    let delta_row: BTreeMap<NodeId, usize> = delta_nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let k_row: BTreeMap<NodeId, usize> = junction_nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();

    let mut b_delta = DMatrix::zeros(delta_nodes.len(), edge_order.len());
    let mut b_k = DMatrix::zeros(junction_nodes.len(), edge_order.len());
    for (col, &eid) in edge_order.iter().enumerate() {
        let rec = graph.edge(eid).unwrap();
        for (node, sign) in [(rec.source, -1.0), (rec.target, 1.0)] {
            if let Some(&row) = delta_row.get(&node) {
                b_delta[(row, col)] = sign;
            } else if let Some(&row) = k_row.get(&node) {
                b_k[(row, col)] = sign;
            } else {
                return Err(Error::DanglingEdge { edge: eid, node });
            }
        }
    }

    Ok(IncidencePartition { b_delta, b_k, edge_order, delta_nodes, junction_nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::fixtures;

    fn fig_network() -> NetworkGraph {
        fixtures::paper_network().expect("bundled network parses")
    }

    #[test]
    fn paper_network_has_two_layers() {
        let mut g = fig_network();
        g.set_edge_active(3, true).unwrap(); // full network
        let layers = compute_hydraulic_layers(&g).unwrap();
        assert_eq!(layers.count, 2);
        // top layer {1,2,3}, bottom layer {4..17}
        let top = layers.layer_of[&1];
        for n in [2, 3] {
            assert_eq!(layers.layer_of[&n], top);
        }
        let bottom = layers.layer_of[&4];
        assert_ne!(top, bottom);
        for n in 5..=17 {
            assert_eq!(layers.layer_of[&n], bottom, "node {n}");
        }
    }

    #[test]
    fn empty_graph_is_an_error() {
        let g = NetworkGraph::new("empty");
        assert!(matches!(compute_hydraulic_layers(&g), Err(Error::NoNodes)));
    }

    #[test]
    fn single_pipe_component_fails_validation() {
        // two nodes, one pipe, DGU and consumer in parallel: n_l = 1
        let mut g = NetworkGraph::new("one-layer");
        g.add_node(1, NodeKind::PressureHolding { pump: fixtures::pressure_pump_bundle(2e5) }).unwrap();
        g.add_node(2, NodeKind::Capacitive { capacitance: 5e-10 }).unwrap();
        let pipe = PipeHydraulics::from_geometry(0.0825, 100.0, 4.5e-5).unwrap();
        g.add_edge(1, 1, 2, fixtures::dgu_form_edge(15e5)).unwrap();
        g.add_edge(2, 2, 1, fixtures::consumer_valve_edge(2e-3)).unwrap();
        g.add_edge(3, 1, 2, EdgeKind::Pipe { pipe, booster: None }).unwrap();
        let layers = compute_hydraulic_layers(&g).unwrap();
        assert_eq!(layers.count, 1);
        let report = validate_network(&g);
        assert!(!report.passed);
        assert!(report.failures().any(|c| c.code == "two_layers"));
    }

    #[test]
    fn symmetric_two_layer_net_has_two_layers() {
        let g = fixtures::minimal_loop_network().unwrap();
        let layers = compute_hydraulic_layers(&g).unwrap();
        assert_eq!(layers.count, 2);
    }

    #[test]
    fn paper_assignment_validates() {
        let mut g = fig_network();
        g.set_edge_active(3, true).unwrap();
        let report = validate_network(&g);
        assert!(report.passed, "{report}");
        // DGU 3 disconnected (the scenario's start) still validates
        let g0 = fig_network();
        assert!(validate_network(&g0).passed);
    }

    #[test]
    fn no_bridging_form_dgu_fails() {
        let mut g = fig_network();
        // switch DGU 1 to VSP mode: no grid-forming DGU bridges the layers
        let rec = g.edge_mut(1).unwrap();
        if let EdgeKind::Dgu { mode, flow_setpoint, .. } = &mut rec.kind {
            *mode = DguMode::Vsp;
            *flow_setpoint = Some(5e-3);
        }
        let report = validate_network(&g);
        assert!(!report.passed);
        assert!(report.failures().any(|c| c.code == "forming_dgu"));
    }

    #[test]
    fn too_few_pipes_fails() {
        let mut g = NetworkGraph::new("p1");
        g.add_node(1, NodeKind::PressureHolding { pump: fixtures::pressure_pump_bundle(2e5) }).unwrap();
        g.add_node(2, NodeKind::Capacitive { capacitance: 5e-10 }).unwrap();
        g.add_node(3, NodeKind::Capacitive { capacitance: 5e-10 }).unwrap();
        let pipe = PipeHydraulics::from_geometry(0.0825, 100.0, 4.5e-5).unwrap();
        g.add_edge(1, 1, 2, fixtures::dgu_form_edge(15e5)).unwrap();
        g.add_edge(2, 2, 3, EdgeKind::Pipe { pipe, booster: None }).unwrap();
        g.add_edge(3, 3, 1, fixtures::consumer_valve_edge(2e-3)).unwrap();
        let report = validate_network(&g);
        assert!(report.failures().any(|c| c.code == "counts"));
    }

    #[test]
    fn chord_count_on_paper_network() {
        let mut g = fig_network();
        g.set_edge_active(3, true).unwrap();
        let chords = independent_flow_edges(&g).unwrap();
        // |E| - |N| + 1 = 25 - 17 + 1
        assert_eq!(chords.len(), 9);
        // all feeding DGUs, all consumers, all mixing edges are chords
        for id in [2, 3, 4, 5, 6, 7, 8, 25] {
            assert!(chords.contains(&id), "edge {id} should be a chord");
        }
        // exactly one loop-closing pipe chord in the top layer
        let pipe_chords: Vec<_> = chords.iter().filter(|id| g.edge(**id).unwrap().kind.is_pipe()).collect();
        assert_eq!(pipe_chords.len(), 1);
        assert!([9, 10, 12].contains(pipe_chords[0]));
    }

    #[test]
    fn tree_shaped_graph_has_no_pipe_chords() {
        let g = fixtures::minimal_loop_network().unwrap();
        let chords = independent_flow_edges(&g).unwrap();
        // chords = consumers only (single DGU is the tree bridge, no pipe loops)
        assert!(chords.iter().all(|id| !g.edge(*id).unwrap().kind.is_pipe()));
        assert_eq!(chords.len(), 1);
    }

    #[test]
    fn incidence_partition_signs_and_shape() {
        let mut g = fig_network();
        g.set_edge_active(3, true).unwrap();
        let part = partition_incidence(&g).unwrap();
        assert_eq!(part.junction_nodes, vec![7]);
        assert_eq!(part.b_k.nrows(), 1);
        assert_eq!(part.b_delta.nrows(), 16);
        assert_eq!(part.b_delta.ncols(), 25);
        // each column sums to zero across the stacked incidence
        for col in 0..part.b_delta.ncols() {
            let mut sum = 0.0;
            let mut abs = 0.0;
            for row in 0..part.b_delta.nrows() {
                sum += part.b_delta[(row, col)];
                abs += part.b_delta[(row, col)].abs();
            }
            for row in 0..part.b_k.nrows() {
                sum += part.b_k[(row, col)];
                abs += part.b_k[(row, col)].abs();
            }
            assert_eq!(sum, 0.0);
            assert_eq!(abs, 2.0);
        }
        // holding node 4 is the first delta row
        assert_eq!(part.delta_nodes[0], 4);
    }

    #[test]
    fn junction_row_signs() {
        // pipe a into junction k, pipe b out of it
        let mut g = NetworkGraph::new("junction");
        g.add_node(1, NodeKind::Capacitive { capacitance: 5e-10 }).unwrap();
        g.add_node(2, NodeKind::Junction).unwrap();
        g.add_node(3, NodeKind::Capacitive { capacitance: 5e-10 }).unwrap();
        let pipe = PipeHydraulics::from_geometry(0.0825, 100.0, 4.5e-5).unwrap();
        g.add_edge(10, 1, 2, EdgeKind::Pipe { pipe, booster: None }).unwrap();
        g.add_edge(11, 2, 3, EdgeKind::Pipe { pipe, booster: None }).unwrap();
        let part = partition_incidence(&g).unwrap();
        assert_eq!(part.b_k.nrows(), 1);
        assert_eq!(part.b_k[(0, 0)], 1.0);
        assert_eq!(part.b_k[(0, 1)], -1.0);
    }

    #[test]
    fn partition_is_deterministic_across_reactivation() {
        let mut g = fig_network();
        g.set_edge_active(3, true).unwrap();
        let before = partition_incidence(&g).unwrap();
        g.set_edge_active(4, false).unwrap();
        let _ = partition_incidence(&g).unwrap();
        g.set_edge_active(4, true).unwrap();
        let after = partition_incidence(&g).unwrap();
        assert_eq!(before, after);
    }
}

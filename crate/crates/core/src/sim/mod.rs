//! Interconnected closed-loop system: state layout, junction algebra,
//! the reduced vector field, manifold projection and time integration.

mod record;
mod runner;
mod scenario;

pub use record::{Channel, RunMeta, SegmentInfo, SegmentRefs, TrajectoryRecord};
pub use runner::{run, RunConfig};
pub use scenario::{EventAction, Integrator, Scenario, SetpointField, TimedEvent};

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::control::{closed_loop_rhs, LoopIo, LoopKind, SubsystemModel, ValveSaturation};
use crate::error::{Error, Result};
use crate::topology::{partition_incidence, IncidencePartition, NetworkGraph, SubsystemId};

/// Index layout: which slice of the stacked state each subsystem owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<(SubsystemId, Range<usize>)>,
    index: BTreeMap<SubsystemId, usize>,
    total: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn range(&self, id: SubsystemId) -> Option<Range<usize>> {
        self.index.get(&id).map(|&i| self.entries[i].1.clone())
    }

    pub fn entries(&self) -> impl Iterator<Item = (SubsystemId, Range<usize>)> + '_ {
        self.entries.iter().cloned()
    }
}

/// Stacked state of the interconnected system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub x: DVector<f64>,
    pub time: f64,
}

/// Cached factorization of the grounded Laplacian
/// L_g = B_KE diag(1/J) B_KE^T used for the junction pressure solve.
#[derive(Debug, Clone)]
pub struct JunctionSolver {
    chol: Cholesky<f64, Dyn>,
}

impl JunctionSolver {
    fn new(b_k: &DMatrix<f64>, inv_j: &[f64]) -> Result<Self> {
        let n = b_k.nrows();
        let mut l_g = DMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for (e, w) in inv_j.iter().enumerate() {
                    acc += b_k[(r, e)] * w * b_k[(c, e)];
                }
                l_g[(r, c)] = acc;
            }
        }
        let chol = Cholesky::new(l_g).ok_or_else(|| {
            Error::Topology("junction system is singular (grounded Laplacian not positive definite)".into())
        })?;
        Ok(Self { chol })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// The assembled closed-loop network: live graph, canonical subsystem
/// models, state layout, incidence partition and junction solver. All
/// caches are rebuilt on topology epochs (connect/disconnect).
#[derive(Debug, Clone)]
pub struct Assembly {
    pub graph: NetworkGraph,
    /// Edge models first (canonical D, L, P, M order), then holding and
    /// capacitive node models. Junctions carry no model.
    pub models: Vec<SubsystemModel>,
    pub ids: Vec<SubsystemId>,
    pub labels: Vec<String>,
    pub layout: Layout,
    pub incidence: IncidencePartition,
    pub junction: Option<JunctionSolver>,
    pub n_edges: usize,
    /// Inverse inertances per edge, in edge order.
    pub inv_j: Vec<f64>,
    pub saturation_on: bool,
}

/// Diagnostics of a single vector-field evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalDiag {
    /// Σ z·d over all subsystems including junctions.
    pub power_sum: f64,
    /// Σ |z·d|.
    pub power_abs: f64,
    /// Whether any valve clamped during this evaluation.
    pub any_saturated: bool,
}

/// Per-subsystem ports and inputs of one evaluation.
#[derive(Debug, Clone, Default)]
pub struct PortData {
    pub d: Vec<f64>,
    pub z: Vec<f64>,
    pub io: Vec<LoopIo>,
    /// Junction pressures in junction-node order.
    pub z_k: DVector<f64>,
}

impl Assembly {
    pub fn new(graph: NetworkGraph, saturation_on: bool) -> Result<Self> {
        let incidence = partition_incidence(&graph)?;
        let mut models = Vec::new();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0usize;

        for &eid in &incidence.edge_order {
            let rec = graph.edge(eid).unwrap();
            let model = SubsystemModel::from_edge(&rec.kind)?;
            let len = model.state_len();
            ids.push(SubsystemId::Edge(eid));
            labels.push(format!("{}{}", rec.kind.class_name(), eid));
            entries.push((SubsystemId::Edge(eid), offset..offset + len));
            offset += len;
            models.push(model);
        }
        let n_edges = models.len();
        for &nid in &incidence.delta_nodes {
            let rec = graph.node(nid).unwrap();
            let model = SubsystemModel::from_node(&rec.kind)?;
            let len = model.state_len();
            ids.push(SubsystemId::Node(nid));
            labels.push(format!("{}{}", rec.kind.class_name(), nid));
            entries.push((SubsystemId::Node(nid), offset..offset + len));
            offset += len;
            models.push(model);
        }

        let index = entries.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
        let layout = Layout { entries, index, total: offset };

        let inv_j: Vec<f64> = incidence
            .edge_order
            .iter()
            .map(|eid| 1.0 / graph.edge(*eid).unwrap().kind.pipe().j)
            .collect();

        let junction = if incidence.junction_nodes.is_empty() {
            None
        } else {
            Some(JunctionSolver::new(&incidence.b_k, &inv_j)?)
        };

        Ok(Self {
            graph,
            models,
            ids,
            labels,
            layout,
            incidence,
            junction,
            n_edges,
            inv_j,
            saturation_on,
        })
    }

    pub fn n_states(&self) -> usize {
        self.layout.len()
    }

    pub fn n_subsystems(&self) -> usize {
        self.models.len()
    }

    fn saturation_for(&self, model: &SubsystemModel) -> Option<ValveSaturation> {
        if !self.saturation_on {
            return None;
        }
        model.valve.as_ref().map(|v| ValveSaturation { lo: 1.0, hi: v.u_v_max() })
    }

    fn slice<'a>(&self, x: &'a DVector<f64>, i: usize) -> &'a [f64] {
        let (_, range) = &self.layout.entries[i];
        &x.as_slice()[range.clone()]
    }

    /// Flow through each edge, in edge order.
    pub fn edge_flows(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n_edges,
            (0..self.n_edges).map(|i| x[self.layout.entries[i].1.start]),
        )
    }

    /// Net junction flow residual B_KE q; empty when no junctions exist.
    pub fn junction_residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.incidence.b_k * self.edge_flows(x)
    }

    /// Closed-loop vector field of the reduced ODE: solves the junction
    /// pressures from the grounded-Laplacian system, then evaluates every
    /// subsystem with its interconnection input.
    pub fn vector_field(
        &self,
        x: &DVector<f64>,
        dx: &mut DVector<f64>,
        mut ports: Option<&mut PortData>,
    ) -> Result<EvalDiag> {
        let n_sub = self.n_subsystems();
        let n_k = self.incidence.junction_nodes.len();

        // interaction outputs
        let mut z = vec![0.0; n_sub];
        for (i, model) in self.models.iter().enumerate() {
            z[i] = model.output(self.slice(x, i));
        }

        // edge inputs from holding/capacitive nodes: d_E = -B_ΔE^T z_Δ
        let mut d = vec![0.0; n_sub];
        for e in 0..self.n_edges {
            let mut acc = 0.0;
            for (row, _) in self.incidence.delta_nodes.iter().enumerate() {
                let w = self.incidence.b_delta[(row, e)];
                if w != 0.0 {
                    acc -= w * z[self.n_edges + row];
                }
            }
            d[e] = acc;
        }

        // evaluate edges against the node-only input
        let mut diag = EvalDiag::default();
        let mut io_store: Vec<LoopIo> = Vec::with_capacity(if ports.is_some() { n_sub } else { 0 });
        for e in 0..self.n_edges {
            let model = &self.models[e];
            let range = self.layout.entries[e].1.clone();
            let io = closed_loop_rhs(
                model,
                &x.as_slice()[range.clone()],
                d[e],
                self.saturation_for(model),
                &mut dx.as_mut_slice()[range],
            );
            diag.any_saturated |= io.saturated;
            if ports.is_some() {
                io_store.push(io);
            }
        }

        // junction pressures from the differentiated constraint
        let mut z_k = DVector::zeros(n_k);
        if let Some(solver) = &self.junction {
            let mut rhs = DVector::zeros(n_k);
            for k in 0..n_k {
                let mut acc = 0.0;
                for e in 0..self.n_edges {
                    let w = self.incidence.b_k[(k, e)];
                    if w != 0.0 {
                        acc += w * dx[self.layout.entries[e].1.start];
                    }
                }
                rhs[k] = acc;
            }
            z_k = solver.solve(&rhs);
            // fold the junction pressures back into the edge flow rows
            for e in 0..self.n_edges {
                let mut corr = 0.0;
                for k in 0..n_k {
                    let w = self.incidence.b_k[(k, e)];
                    if w != 0.0 {
                        corr += w * z_k[k];
                    }
                }
                if corr != 0.0 {
                    dx[self.layout.entries[e].1.start] -= corr * self.inv_j[e];
                    d[e] -= corr;
                }
            }
        }

        // node inputs d_Δ = B_ΔE z_E and node dynamics
        for (row, _) in self.incidence.delta_nodes.iter().enumerate() {
            let mut acc = 0.0;
            for e in 0..self.n_edges {
                let w = self.incidence.b_delta[(row, e)];
                if w != 0.0 {
                    acc += w * z[e];
                }
            }
            let i = self.n_edges + row;
            d[i] = acc;
            let model = &self.models[i];
            let range = self.layout.entries[i].1.clone();
            let io = closed_loop_rhs(
                model,
                &x.as_slice()[range.clone()],
                d[i],
                None,
                &mut dx.as_mut_slice()[range],
            );
            if ports.is_some() {
                io_store.push(io);
            }
        }

        // power balance over the full interconnection (junction inputs are
        // the constraint residuals B_KE q)
        for i in 0..n_sub {
            let p = z[i] * d[i];
            diag.power_sum += p;
            diag.power_abs += p.abs();
        }
        if n_k > 0 {
            let q = self.edge_flows(x);
            let d_k = &self.incidence.b_k * q;
            for k in 0..n_k {
                let p = z_k[k] * d_k[k];
                diag.power_sum += p;
                diag.power_abs += p.abs();
            }
        }

        if let Some(ports) = ports.as_deref_mut() {
            ports.d = d;
            ports.z = z;
            ports.io = io_store;
            ports.z_k = z_k;
        }

        if dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { time: f64::NAN, detail: "non-finite derivative".into() });
        }
        Ok(diag)
    }

    /// Junction pressures at a given state.
    pub fn junction_pressures(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut dx = DVector::zeros(self.n_states());
        let mut ports = PortData::default();
        self.vector_field(x, &mut dx, Some(&mut ports))?;
        Ok(ports.z_k)
    }

    /// Minimal-norm (in the diag(1/J) metric on momenta) correction of the
    /// edge flow states onto the junction manifold B_KE q = 0.
    pub fn project_onto_manifold(&self, x: &mut DVector<f64>) {
        let Some(solver) = &self.junction else { return };
        let residual = self.junction_residual(x);
        if residual.amax() == 0.0 {
            return;
        }
        let y = solver.solve(&residual);
        for e in 0..self.n_edges {
            let mut corr = 0.0;
            for k in 0..self.incidence.junction_nodes.len() {
                corr += self.incidence.b_k[(k, e)] * y[k];
            }
            if corr != 0.0 {
                x[self.layout.entries[e].1.start] -= corr * self.inv_j[e];
            }
        }
    }

    /// Kind of the i-th subsystem.
    pub fn kind(&self, i: usize) -> LoopKind {
        self.models[i].kind
    }
}

/// One classic RK4 step of the augmented system (state + per-subsystem
/// supply quadrature). `supply` returns the per-subsystem integrand.
pub fn rk4_step<F>(f: &mut F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> Result<()>,
{
    let n = x.len();
    let mut k1 = DVector::zeros(n);
    let mut k2 = DVector::zeros(n);
    let mut k3 = DVector::zeros(n);
    let mut k4 = DVector::zeros(n);
    f(x, &mut k1)?;
    f(&(x + &k1 * (h / 2.0)), &mut k2)?;
    f(&(x + &k2 * (h / 2.0)), &mut k3)?;
    f(&(x + &k3 * h), &mut k4)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Dormand-Prince 5(4) embedded step; returns (x5, err_norm_scaled).
#[allow(clippy::too_many_arguments)]
pub fn rk45_step<F>(
    f: &mut F,
    x: &DVector<f64>,
    h: f64,
    atol: f64,
    rtol: f64,
) -> Result<(DVector<f64>, f64)>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> Result<()>,
{
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] =
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    let n = x.len();
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
    let mut dx = DVector::zeros(n);
    f(x, &mut dx)?;
    k.push(dx.clone());
    for s in 0..6 {
        let mut xs = x.clone();
        for (j, kj) in k.iter().enumerate() {
            let a = A[s][j];
            if a != 0.0 {
                xs += kj * (a * h);
            }
        }
        let mut ks = DVector::zeros(n);
        f(&xs, &mut ks)?;
        k.push(ks);
    }
    let mut x5 = x.clone();
    let mut x4 = x.clone();
    for (j, kj) in k.iter().enumerate() {
        if B5[j] != 0.0 {
            x5 += kj * (B5[j] * h);
        }
        if B4[j] != 0.0 {
            x4 += kj * (B4[j] * h);
        }
    }
    let mut err = 0.0f64;
    for i in 0..n {
        let sc = atol + rtol * x[i].abs().max(x5[i].abs());
        err += ((x5[i] - x4[i]) / sc).powi(2);
    }
    Ok((x5, (err / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::PipeHydraulics;
    use crate::config::fixtures;
    use crate::topology::{EdgeKind, NodeKind};
    use approx::assert_abs_diff_eq;

    fn junction_net() -> NetworkGraph {
        let mut g = NetworkGraph::new("junction");
        g.add_node(1, NodeKind::Capacitive { capacitance: 5e-10 }).unwrap();
        g.add_node(2, NodeKind::Junction).unwrap();
        g.add_node(3, NodeKind::Capacitive { capacitance: 5e-10 }).unwrap();
        let pipe = PipeHydraulics::from_geometry(0.0825, 100.0, 4.5e-5).unwrap();
        g.add_edge(10, 1, 2, EdgeKind::Pipe { pipe, booster: None }).unwrap();
        g.add_edge(11, 2, 3, EdgeKind::Pipe { pipe, booster: None }).unwrap();
        g
    }

    #[test]
    fn junction_pressure_symmetric_case() {
        // equal inertances, zero flow (no friction), equal end pressures:
        // the junction sits at the same pressure
        let assembly = Assembly::new(junction_net(), false).unwrap();
        let p = 2.4e5;
        let mut x = DVector::zeros(assembly.n_states());
        // states: pipe10 q, pipe11 q, cap1 p, cap3 p
        x[2] = p;
        x[3] = p;
        let z_k = assembly.junction_pressures(&x).unwrap();
        assert_eq!(z_k.len(), 1);
        assert_abs_diff_eq!(z_k[0], p, epsilon = 1e-9 * p);
    }

    #[test]
    fn no_junction_returns_empty() {
        let g = fixtures::minimal_loop_network().unwrap();
        let assembly = Assembly::new(g, false).unwrap();
        assert!(assembly.junction.is_none());
        let x = DVector::zeros(assembly.n_states());
        assert_eq!(assembly.junction_pressures(&x).unwrap().len(), 0);
    }

    #[test]
    fn projection_splits_flow_mismatch() {
        let assembly = Assembly::new(junction_net(), false).unwrap();
        let mut x = DVector::zeros(assembly.n_states());
        x[0] = 1e-3; // inflow
        x[1] = 0.0; // outflow
        assembly.project_onto_manifold(&mut x);
        assert_abs_diff_eq!(x[0], 5e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(x[1], 5e-4, epsilon = 1e-18);
        let res = assembly.junction_residual(&x);
        assert!(res.amax() <= 1e-12);
    }

    #[test]
    fn projection_is_identity_on_manifold() {
        let assembly = Assembly::new(junction_net(), false).unwrap();
        let mut x = DVector::zeros(assembly.n_states());
        x[0] = 2e-3;
        x[1] = 2e-3;
        x[2] = 1e5;
        let before = x.clone();
        assembly.project_onto_manifold(&mut x);
        assert_eq!(x, before);
    }

    #[test]
    fn vector_field_constraint_derivative_vanishes() {
        let assembly = Assembly::new(junction_net(), false).unwrap();
        let mut x = DVector::zeros(assembly.n_states());
        x[0] = 3e-3;
        x[1] = 3e-3;
        x[2] = 2.2e5;
        x[3] = 1.9e5;
        let mut dx = DVector::zeros(assembly.n_states());
        assembly.vector_field(&x, &mut dx, None).unwrap();
        // d/dt (B_KE q) = dq10 - dq11 must vanish to solver precision
        assert_abs_diff_eq!(dx[0], dx[1], epsilon = 1e-12 * dx[0].abs().max(1.0));
    }

    #[test]
    fn power_balance_is_machine_precision() {
        let assembly = Assembly::new(junction_net(), false).unwrap();
        let mut x = DVector::zeros(assembly.n_states());
        x[0] = 3e-3;
        x[1] = 1e-3;
        x[2] = 2.2e5;
        x[3] = 1.9e5;
        let mut dx = DVector::zeros(assembly.n_states());
        let diag = assembly.vector_field(&x, &mut dx, None).unwrap();
        assert!(diag.power_sum.abs() <= 1e-9 * diag.power_abs.max(1.0));
    }
}

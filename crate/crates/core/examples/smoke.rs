use dhn_core::config::fixtures;
use dhn_core::passivity::{solve_equilibrium, EquilibriumOptions};
use dhn_core::sim::{rk4_step, Assembly};
use dhn_core::topology::SubsystemId;
use nalgebra::DVector;

fn main() {
    let mut graph = fixtures::paper_network().unwrap();
    graph.set_edge_active(3, true).unwrap();
    graph.set_edge_active(4, false).unwrap();
    let mut assembly = Assembly::new(graph, false).unwrap();
    let steps: [(SubsystemId, f64); 5] = [
        (SubsystemId::Edge(2), 4.5e-3), (SubsystemId::Edge(6), 4e-3),
        (SubsystemId::Edge(7), 5e-3), (SubsystemId::Edge(8), 6e-3),
        (SubsystemId::Edge(25), 3e-3),
    ];
    for (id, v) in steps {
        let idx = assembly.ids.iter().position(|i| *i == id).unwrap();
        assembly.models[idx].flow_setpoint = Some(v);
    }
    let sol = solve_equilibrium(&assembly, None, &EquilibriumOptions { check_targets: false, ..Default::default() }).unwrap();
    let dgu3 = assembly.ids.iter().position(|i| *i == SubsystemId::Edge(3)).unwrap();
    let range = assembly.layout.entries().nth(dgu3).unwrap().1;
    let mut x = sol.x.clone();
    x[range.start + 2] += 100.0; // poke dgu3.p_pump by 100 Pa
    let dt = 1e-3;
    let mut f = |xx: &DVector<f64>, out: &mut DVector<f64>| assembly.vector_field(xx, out, None).map(|_| ());
    for k in 0..10001 {
        if k % 1000 == 0 {
            let diff = (&x - &sol.x).amax();
            let dp = x[range.start + 2] - sol.x[range.start + 2];
            println!("t={:4.1}: max|dx|={:.3e}, dgu3.dp_pump={:+.3e}", k as f64 * dt, diff, dp);
        }
        x = rk4_step(&mut f, &x, dt).unwrap();
    }
}

//! The three decentralized controller laws (pump pressure, pump flow,
//! valve flow) and the per-mode closed-loop subsystem dynamics they
//! induce. Controller integrators are plant states integrated jointly
//! with the physical dynamics; every law sees only local measurements.

use serde::{Deserialize, Serialize};

use crate::components::{
    self, PipeHydraulics, PumpParams, ValveParams,
};
use crate::error::{Error, Result};
use crate::topology::{ConsumerMode, DguMode, EdgeKind, NodeKind, PressurePump};

/// Gains of the pump pressure controller (state feedback + PI).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpPressureGains {
    /// Assigned damping R^p in Pa·s/m³; choosing R^p = R_P removes the
    /// q_P dependence of the law.
    pub r_damp: f64,
    /// Integrator constant Q_I (the law divides by it).
    pub q_i: f64,
}

impl PumpPressureGains {
    pub fn new(r_damp: f64, q_i: f64) -> Result<Self> {
        if r_damp <= 0.0 || q_i <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "pressure controller gains must be positive (R^p = {r_damp}, Q_I = {q_i})"
            )));
        }
        Ok(Self { r_damp, q_i })
    }
}

/// Gains of the pump flow controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpFlowGains {
    pub k_p: f64,
    pub q_i: f64,
}

impl PumpFlowGains {
    /// Construction enforces Q_I > 0 and κ^f = Q_I(K_P + 1) - C_P > 0.
    pub fn new(k_p: f64, q_i: f64, c_p: f64) -> Result<Self> {
        if q_i <= 0.0 {
            return Err(Error::InvalidParameter(format!("Q_I must be positive, got {q_i}")));
        }
        let gains = Self { k_p, q_i };
        let kappa = gains.kappa(c_p);
        if kappa <= 0.0 {
            return Err(Error::GainCondition { kappa });
        }
        Ok(gains)
    }

    /// κ^f = Q_I(K_P + 1) - C_P.
    pub fn kappa(&self, c_p: f64) -> f64 {
        self.q_i * (self.k_p + 1.0) - c_p
    }
}

/// Gains of the valve flow controller (PI on the passive output ŷ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValveFlowGains {
    pub k_p: f64,
    pub q_i: f64,
}

impl ValveFlowGains {
    pub fn new(k_p: f64, q_i: f64) -> Result<Self> {
        if k_p <= 0.0 || q_i <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "valve controller gains must be positive (K_P = {k_p}, Q_I = {q_i})"
            )));
        }
        Ok(Self { k_p, q_i })
    }
}

/// Pump pressure law: u_P = (R_P - R^p) q_P - R^p r + (J_P/Q_I)(p* - p_P),
/// with integrator update ṙ = (p_P - p*)/Q_I.
pub fn pump_pressure_control(
    gains: &PumpPressureGains,
    pump: &PumpParams,
    setpoint: f64,
    q_p: f64,
    p_p: f64,
    r: f64,
) -> (f64, f64) {
    let u_p = (pump.r_p - gains.r_damp) * q_p - gains.r_damp * r
        + pump.j_p / gains.q_i * (setpoint - p_p);
    let r_dot = (p_p - setpoint) / gains.q_i;
    (u_p, r_dot)
}

/// Pump flow law: u_P = -K_P p_P - r, ṙ = (q - q*)/Q_I.
pub fn pump_flow_control(gains: &PumpFlowGains, setpoint: f64, q: f64, p_p: f64, r: f64) -> (f64, f64) {
    (-gains.k_p * p_p - r, (q - setpoint) / gains.q_i)
}

/// Saturation bounds for the virtual valve input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValveSaturation {
    pub lo: f64,
    pub hi: f64,
}

/// Output of one valve-law evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValveCommand {
    /// Raw law output -K_P ŷ + r.
    pub u_v_raw: f64,
    /// Applied input after optional clamping.
    pub u_v: f64,
    /// Passive output ŷ = -μ̂(q)(q - q*).
    pub y_hat: f64,
    /// Integrator derivative after conditional anti-windup.
    pub r_dot: f64,
    /// Whether the clamp was active this evaluation.
    pub saturated: bool,
}

/// Valve flow law with optional saturation and conditional anti-windup:
/// the integrator freezes while the command is clamped and the update
/// would push it further outside the box.
pub fn valve_flow_control(
    gains: &ValveFlowGains,
    valve: &ValveParams,
    setpoint: f64,
    q: f64,
    r: f64,
    saturation: Option<ValveSaturation>,
) -> ValveCommand {
    let y_hat = -valve.mu_hat(q) * (q - setpoint);
    let u_v_raw = -gains.k_p * y_hat + r;
    let mut r_dot = -y_hat / gains.q_i;
    let (u_v, saturated) = match saturation {
        Some(bounds) if u_v_raw > bounds.hi => {
            if r_dot > 0.0 {
                r_dot = 0.0;
            }
            (bounds.hi, true)
        }
        Some(bounds) if u_v_raw < bounds.lo => {
            if r_dot < 0.0 {
                r_dot = 0.0;
            }
            (bounds.lo, true)
        }
        _ => (u_v_raw, false),
    };
    ValveCommand { u_v_raw, u_v, y_hat, r_dot, saturated }
}

/// Closed-loop subsystem classes covering Problem modes (a)-(i).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopKind {
    /// Grid-forming DGU: pressure-controlled pump, valve fully open.
    DguForm,
    /// Grid-feeding DGU via valve / boosted consumer: pressure pump + flow valve.
    PumpAndValve,
    /// DVSP DGU or consumer: flow-controlled pump, valve fully open.
    VspPump,
    /// Valve-only consumer or mixing connection.
    FlowValve,
    /// Pipe without booster.
    PlainPipe,
    /// Pipe with pressure-controlled booster pump.
    BoostedPipe,
    /// Pressure holding node.
    Holding,
    /// Capacitive node.
    Capacitive,
}

/// Runtime model of one subsystem: resolved parameters plus mutable
/// setpoints. State slices follow the per-kind layouts documented on
/// [`LoopKind`] (flow first for edges).
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemModel {
    pub kind: LoopKind,
    pub pipe: Option<PipeHydraulics>,
    pub valve: Option<ValveParams>,
    pub pump: Option<PumpParams>,
    pub pressure_gains: Option<PumpPressureGains>,
    pub flow_gains: Option<PumpFlowGains>,
    pub valve_gains: Option<ValveFlowGains>,
    /// Pressure setpoint p* in Pa (pressure-controlled pumps).
    pub pressure_setpoint: Option<f64>,
    /// Flow setpoint q* in m³/s (flow-controlled subsystems).
    pub flow_setpoint: Option<f64>,
    /// Node capacitance for capacitive nodes.
    pub capacitance: Option<f64>,
}

/// Inputs/outputs of one closed-loop rhs evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LoopIo {
    /// Interaction output z (flow for edges, pressure for nodes).
    pub z: f64,
    pub u_p: Option<f64>,
    pub u_v: Option<f64>,
    pub u_v_raw: Option<f64>,
    pub y_hat: Option<f64>,
    pub saturated: bool,
}

impl SubsystemModel {
    /// Number of states carried by this subsystem.
    pub fn state_len(&self) -> usize {
        match self.kind {
            LoopKind::DguForm | LoopKind::VspPump | LoopKind::BoostedPipe => 4,
            LoopKind::PumpAndValve => 5,
            LoopKind::FlowValve => 2,
            LoopKind::PlainPipe | LoopKind::Capacitive => 1,
            LoopKind::Holding => 3,
        }
    }

    /// State names in layout order.
    pub fn state_names(&self) -> &'static [&'static str] {
        match self.kind {
            LoopKind::DguForm | LoopKind::VspPump | LoopKind::BoostedPipe => {
                &["q", "q_pump", "p_pump", "r"]
            }
            LoopKind::PumpAndValve => &["q", "q_pump", "p_pump", "r_pump", "r_valve"],
            LoopKind::FlowValve => &["q", "r_valve"],
            LoopKind::PlainPipe => &["q"],
            LoopKind::Holding => &["q_pump", "p_pump", "r"],
            LoopKind::Capacitive => &["p"],
        }
    }

    /// Whether this model sits on an edge (z = q) or a node (z = pressure).
    pub fn is_edge(&self) -> bool {
        !matches!(self.kind, LoopKind::Holding | LoopKind::Capacitive)
    }

    /// Interaction output read from the state slice.
    pub fn output(&self, x: &[f64]) -> f64 {
        match self.kind {
            LoopKind::Holding => x[1],
            LoopKind::Capacitive => x[0],
            _ => x[0],
        }
    }

    /// Build the runtime model from a typed edge.
    pub fn from_edge(kind: &EdgeKind) -> Result<Self> {
        let mut model = SubsystemModel {
            kind: LoopKind::PlainPipe,
            pipe: None,
            valve: None,
            pump: None,
            pressure_gains: None,
            flow_gains: None,
            valve_gains: None,
            pressure_setpoint: None,
            flow_setpoint: None,
            capacitance: None,
        };
        match kind {
            EdgeKind::Dgu {
                mode,
                pipe,
                valve,
                pressure_pump,
                flow_pump,
                valve_gains,
                flow_setpoint,
            } => {
                model.pipe = Some(*pipe);
                model.valve = Some(*valve);
                match mode {
                    DguMode::Form => {
                        let pp = pressure_pump
                            .ok_or_else(|| Error::ModeMismatch("grid-forming DGU needs a pressure pump".into()))?;
                        model.kind = LoopKind::DguForm;
                        model.pump = Some(pp.pump);
                        model.pressure_gains = Some(pp.gains);
                        model.pressure_setpoint = Some(pp.setpoint);
                    }
                    DguMode::Valve => {
                        let pp = pressure_pump
                            .ok_or_else(|| Error::ModeMismatch("valve-feeding DGU needs a pressure pump".into()))?;
                        let vg = valve_gains
                            .ok_or_else(|| Error::ModeMismatch("valve-feeding DGU needs valve gains".into()))?;
                        let q_star = flow_setpoint
                            .ok_or_else(|| Error::ModeMismatch("valve-feeding DGU needs a flow setpoint".into()))?;
                        model.kind = LoopKind::PumpAndValve;
                        model.pump = Some(pp.pump);
                        model.pressure_gains = Some(pp.gains);
                        model.pressure_setpoint = Some(pp.setpoint);
                        model.valve_gains = Some(vg);
                        model.flow_setpoint = Some(q_star);
                    }
                    DguMode::Vsp => {
                        let fp = flow_pump
                            .ok_or_else(|| Error::ModeMismatch("DVSP DGU needs a flow pump".into()))?;
                        let q_star = flow_setpoint
                            .ok_or_else(|| Error::ModeMismatch("DVSP DGU needs a flow setpoint".into()))?;
                        model.kind = LoopKind::VspPump;
                        model.pump = Some(fp.pump);
                        model.flow_gains = Some(fp.gains);
                        model.flow_setpoint = Some(q_star);
                    }
                }
            }
            EdgeKind::Consumer {
                mode,
                pipe,
                valve,
                pressure_pump,
                flow_pump,
                valve_gains,
                flow_setpoint,
            } => {
                model.pipe = Some(*pipe);
                model.valve = Some(*valve);
                model.flow_setpoint = Some(*flow_setpoint);
                match mode {
                    ConsumerMode::Boost => {
                        let pp = pressure_pump
                            .ok_or_else(|| Error::ModeMismatch("boosted consumer needs a pressure pump".into()))?;
                        let vg = valve_gains
                            .ok_or_else(|| Error::ModeMismatch("boosted consumer needs valve gains".into()))?;
                        model.kind = LoopKind::PumpAndValve;
                        model.pump = Some(pp.pump);
                        model.pressure_gains = Some(pp.gains);
                        model.pressure_setpoint = Some(pp.setpoint);
                        model.valve_gains = Some(vg);
                    }
                    ConsumerMode::Valve => {
                        if pressure_pump.is_some() || flow_pump.is_some() {
                            return Err(Error::ModeMismatch(
                                "valve-mode consumer must not carry a pump".into(),
                            ));
                        }
                        let vg = valve_gains
                            .ok_or_else(|| Error::ModeMismatch("valve-mode consumer needs valve gains".into()))?;
                        model.kind = LoopKind::FlowValve;
                        model.valve_gains = Some(vg);
                    }
                    ConsumerMode::Vsp => {
                        let fp = flow_pump
                            .ok_or_else(|| Error::ModeMismatch("DVSP consumer needs a flow pump".into()))?;
                        model.kind = LoopKind::VspPump;
                        model.pump = Some(fp.pump);
                        model.flow_gains = Some(fp.gains);
                    }
                }
            }
            EdgeKind::Pipe { pipe, booster } => {
                model.pipe = Some(*pipe);
                match booster {
                    Some(pp) => {
                        model.kind = LoopKind::BoostedPipe;
                        model.pump = Some(pp.pump);
                        model.pressure_gains = Some(pp.gains);
                        model.pressure_setpoint = Some(pp.setpoint);
                    }
                    None => model.kind = LoopKind::PlainPipe,
                }
            }
            EdgeKind::Mixing { pipe, valve, valve_gains, flow_setpoint } => {
                model.kind = LoopKind::FlowValve;
                model.pipe = Some(*pipe);
                model.valve = Some(*valve);
                model.valve_gains = Some(*valve_gains);
                model.flow_setpoint = Some(*flow_setpoint);
            }
        }
        Ok(model)
    }

    /// Build the runtime model from a typed node.
    pub fn from_node(kind: &NodeKind) -> Result<Self> {
        let mut model = SubsystemModel {
            kind: LoopKind::Capacitive,
            pipe: None,
            valve: None,
            pump: None,
            pressure_gains: None,
            flow_gains: None,
            valve_gains: None,
            pressure_setpoint: None,
            flow_setpoint: None,
            capacitance: None,
        };
        match kind {
            NodeKind::PressureHolding { pump } => {
                model.kind = LoopKind::Holding;
                model.pump = Some(pump.pump);
                model.pressure_gains = Some(pump.gains);
                model.pressure_setpoint = Some(pump.setpoint);
            }
            NodeKind::Capacitive { capacitance } => {
                if *capacitance <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "node capacitance must be positive, got {capacitance}"
                    )));
                }
                model.capacitance = Some(*capacitance);
            }
            NodeKind::Junction => {
                return Err(Error::ModeMismatch("junctions carry no state".into()));
            }
        }
        Ok(model)
    }

    pub fn pressure_pump_bundle(&self) -> Option<PressurePump> {
        Some(PressurePump {
            pump: self.pump?,
            gains: self.pressure_gains?,
            setpoint: self.pressure_setpoint?,
        })
    }
}

/// Closed-loop rhs of one subsystem: plant dynamics composed with its
/// controller(s). `x` and `dx` are the subsystem's state slice; `d` is
/// the interaction input. Returns the applied inputs and ports.
pub fn closed_loop_rhs(
    model: &SubsystemModel,
    x: &[f64],
    d: f64,
    saturation: Option<ValveSaturation>,
    dx: &mut [f64],
) -> LoopIo {
    debug_assert_eq!(x.len(), model.state_len());
    let mut io = LoopIo { z: model.output(x), ..Default::default() };
    match model.kind {
        LoopKind::DguForm | LoopKind::VspPump => {
            let (q, q_p, p_p, r) = (x[0], x[1], x[2], x[3]);
            let pipe = model.pipe.as_ref().unwrap();
            let valve = model.valve.as_ref().unwrap();
            let pump = model.pump.as_ref().unwrap();
            let u_v = 1.0; // fully open
            let (u_p, r_dot) = match model.kind {
                LoopKind::DguForm => {
                    let g = model.pressure_gains.as_ref().unwrap();
                    pump_pressure_control(g, pump, model.pressure_setpoint.unwrap(), q_p, p_p, r)
                }
                _ => {
                    let g = model.flow_gains.as_ref().unwrap();
                    pump_flow_control(g, model.flow_setpoint.unwrap(), q, p_p, r)
                }
            };
            let (dq, dq_p, dp_p) =
                components::dgu_consumer_rhs(pipe, valve, pump, (q, q_p, p_p), u_v, u_p, d);
            dx.copy_from_slice(&[dq, dq_p, dp_p, r_dot]);
            io.u_p = Some(u_p);
            io.u_v = Some(u_v);
            io.u_v_raw = Some(u_v);
        }
        LoopKind::PumpAndValve => {
            let (q, q_p, p_p, r_a, r_b) = (x[0], x[1], x[2], x[3], x[4]);
            let pipe = model.pipe.as_ref().unwrap();
            let valve = model.valve.as_ref().unwrap();
            let pump = model.pump.as_ref().unwrap();
            let pg = model.pressure_gains.as_ref().unwrap();
            let vg = model.valve_gains.as_ref().unwrap();
            let (u_p, ra_dot) =
                pump_pressure_control(pg, pump, model.pressure_setpoint.unwrap(), q_p, p_p, r_a);
            let cmd = valve_flow_control(vg, valve, model.flow_setpoint.unwrap(), q, r_b, saturation);
            let (dq, dq_p, dp_p) =
                components::dgu_consumer_rhs(pipe, valve, pump, (q, q_p, p_p), cmd.u_v, u_p, d);
            dx.copy_from_slice(&[dq, dq_p, dp_p, ra_dot, cmd.r_dot]);
            io.u_p = Some(u_p);
            io.u_v = Some(cmd.u_v);
            io.u_v_raw = Some(cmd.u_v_raw);
            io.y_hat = Some(cmd.y_hat);
            io.saturated = cmd.saturated;
        }
        LoopKind::FlowValve => {
            let (q, r) = (x[0], x[1]);
            let pipe = model.pipe.as_ref().unwrap();
            let valve = model.valve.as_ref().unwrap();
            let vg = model.valve_gains.as_ref().unwrap();
            let cmd = valve_flow_control(vg, valve, model.flow_setpoint.unwrap(), q, r, saturation);
            dx[0] = components::mixing_rhs(pipe, valve, q, cmd.u_v, d);
            dx[1] = cmd.r_dot;
            io.u_v = Some(cmd.u_v);
            io.u_v_raw = Some(cmd.u_v_raw);
            io.y_hat = Some(cmd.y_hat);
            io.saturated = cmd.saturated;
        }
        LoopKind::PlainPipe => {
            dx[0] = components::plain_pipe_rhs(model.pipe.as_ref().unwrap(), x[0], d);
        }
        LoopKind::BoostedPipe => {
            let (q, q_p, p_p, r) = (x[0], x[1], x[2], x[3]);
            let pipe = model.pipe.as_ref().unwrap();
            let pump = model.pump.as_ref().unwrap();
            let g = model.pressure_gains.as_ref().unwrap();
            let (u_p, r_dot) =
                pump_pressure_control(g, pump, model.pressure_setpoint.unwrap(), q_p, p_p, r);
            let (dq, dq_p, dp_p) = components::pipe_rhs(pipe, pump, (q, q_p, p_p), u_p, d);
            dx.copy_from_slice(&[dq, dq_p, dp_p, r_dot]);
            io.u_p = Some(u_p);
        }
        LoopKind::Holding => {
            let (q_p, p_p, r) = (x[0], x[1], x[2]);
            let pump = model.pump.as_ref().unwrap();
            let g = model.pressure_gains.as_ref().unwrap();
            let (u_p, r_dot) =
                pump_pressure_control(g, pump, model.pressure_setpoint.unwrap(), q_p, p_p, r);
            let (dq_p, dp_p) = components::holding_rhs(pump, (q_p, p_p), u_p, d);
            dx.copy_from_slice(&[dq_p, dp_p, r_dot]);
            io.u_p = Some(u_p);
        }
        LoopKind::Capacitive => {
            dx[0] = components::capacitive_rhs(model.capacitance.unwrap(), d);
        }
    }
    io
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::ValveCharacteristic;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn pressure_pump() -> PumpParams {
        PumpParams::from_resistance(1e6).unwrap()
    }

    fn pressure_gains() -> PumpPressureGains {
        PumpPressureGains::new(1e6, 1.0 / 3.64e-7).unwrap()
    }

    fn table1_valve() -> ValveParams {
        ValveParams::new(7.9e-5, ValveCharacteristic::Linear, 0.05).unwrap()
    }

    #[test]
    fn pressure_law_zero_error_zero_state() {
        let pump = pressure_pump();
        let g = pressure_gains(); // R^p = R_P
        let p_star = 15e5;
        let (u_p, r_dot) = pump_pressure_control(&g, &pump, p_star, 0.0, p_star, 0.0);
        assert_abs_diff_eq!(u_p, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r_dot, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pressure_law_independent_of_q_p_when_matched() {
        let pump = pressure_pump();
        let g = pressure_gains();
        let (u1, _) = pump_pressure_control(&g, &pump, 15e5, 1e-3, 14e5, 0.3);
        let (u2, _) = pump_pressure_control(&g, &pump, 15e5, 9e-3, 14e5, 0.3);
        assert_relative_eq!(u1, u2, max_relative = 1e-12);
    }

    /// The algebraic-IDA composition (ν, χ form) equals the PI form for
    /// any shared integrator state, including mismatched damping.
    #[test]
    fn pressure_law_matches_ida_composition() {
        let pump = pressure_pump();
        for r_damp in [1e6, 3.3e5, 2.7e6] {
            let g = PumpPressureGains::new(r_damp, 1.0 / 3.64e-7).unwrap();
            for (q_p, p_p, r) in [(1e-3, 14.2e5, 0.4), (-2e-3, 15.5e5, -1.2), (0.0, 15e5, 0.0)] {
                let p_star = 15e5;
                let (u_pi, _) = pump_pressure_control(&g, &pump, p_star, q_p, p_p, r);
                let chi = q_p + r;
                let nu = -p_p - pump.r_p * q_p + pump.j_p / g.q_i * (p_p - p_star);
                let u_ida = -nu - g.r_damp * chi - p_p;
                assert_relative_eq!(u_pi, u_ida, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn flow_law_holds_at_setpoint() {
        let g = PumpFlowGains::new(2.0, 5e-11, 2.13e-12).unwrap();
        let (_, r_dot) = pump_flow_control(&g, 3e-3, 3e-3, 1e4, -1e5);
        assert_eq!(r_dot, 0.0);
    }

    #[test]
    fn flow_gain_gate_accepts_table_values() {
        // paper-reported flow controller values pass the gain condition
        let g = PumpFlowGains::new(2e6, 1.0 / 2e10, 2.13e-12).unwrap();
        assert!(g.kappa(2.13e-12) > 0.0);
    }

    #[test]
    fn flow_gain_gate_rejects_nonpositive_kappa() {
        assert!(matches!(
            PumpFlowGains::new(-1.0, 5e-11, 2.13e-12),
            Err(Error::GainCondition { .. })
        ));
        assert!(PumpFlowGains::new(1.0, -1e-11, 2.13e-12).is_err());
    }

    #[test]
    fn valve_law_holds_at_setpoint() {
        let g = ValveFlowGains::new(1e4, 1e-4).unwrap();
        let v = table1_valve();
        let cmd = valve_flow_control(&g, &v, 2e-3, 2e-3, 620.0, None);
        assert_eq!(cmd.y_hat, 0.0);
        assert_eq!(cmd.u_v, 620.0);
        assert_eq!(cmd.r_dot, 0.0);
    }

    #[test]
    fn valve_law_stalls_at_zero_flow() {
        let g = ValveFlowGains::new(1e4, 1e-4).unwrap();
        let v = table1_valve();
        let cmd = valve_flow_control(&g, &v, 5e-3, 0.0, 10.0, None);
        assert_eq!(cmd.y_hat, 0.0);
        assert_eq!(cmd.u_v, 10.0);
    }

    #[test]
    fn valve_law_table_values() {
        let g = ValveFlowGains::new(1e4, 1e-4).unwrap();
        let v = table1_valve();
        let r = 37.0;
        let cmd = valve_flow_control(&g, &v, 2e-3, 2.2e-3, r, None);
        assert_relative_eq!(cmd.y_hat, -0.15511, max_relative = 1e-3);
        assert_relative_eq!(cmd.u_v - r, 1551.1, max_relative = 1e-3);
    }

    #[test]
    fn anti_windup_freezes_outward_updates_only() {
        let g = ValveFlowGains::new(1e4, 1e-4).unwrap();
        let v = table1_valve();
        let sat = Some(ValveSaturation { lo: 1.0, hi: 400.0 });
        // flow above setpoint, command beyond the bound: integrator frozen
        let cmd = valve_flow_control(&g, &v, 2e-3, 3e-3, 390.0, sat);
        assert!(cmd.saturated && cmd.u_v == 400.0 && cmd.r_dot == 0.0);
        // still clamped but error pulls back inside: integrator released
        let cmd = valve_flow_control(&g, &v, 2e-3, 1.5e-3, 1e4, sat);
        assert!(cmd.saturated && cmd.u_v == 400.0);
        assert!(cmd.r_dot < 0.0);
        // clamped low with outward error: frozen
        let cmd = valve_flow_control(&g, &v, 2e-3, 1e-3, -50.0, sat);
        assert!(cmd.saturated && cmd.u_v == 1.0 && cmd.r_dot == 0.0);
        // clamped low but error pulls the command back up: released
        let cmd = valve_flow_control(&g, &v, 2e-3, 2.05e-3, -600.0, sat);
        assert!(cmd.saturated && cmd.u_v == 1.0);
        assert!(cmd.r_dot > 0.0);
    }

    #[test]
    fn boost_consumer_equals_valve_dgu_closed_loop() {
        let pipe = PipeHydraulics::from_geometry(0.0359, 25.0, 4.5e-5).unwrap();
        let valve = table1_valve();
        let pp = PressurePump { pump: pressure_pump(), gains: pressure_gains(), setpoint: 6e5 };
        let vg = ValveFlowGains::new(1e3, 1e-4).unwrap();
        let dgu = EdgeKind::Dgu {
            mode: DguMode::Valve,
            pipe,
            valve,
            pressure_pump: Some(pp),
            flow_pump: None,
            valve_gains: Some(vg),
            flow_setpoint: Some(2.5e-3),
        };
        let cons = EdgeKind::Consumer {
            mode: ConsumerMode::Boost,
            pipe,
            valve,
            pressure_pump: Some(pp),
            flow_pump: None,
            valve_gains: Some(vg),
            flow_setpoint: 2.5e-3,
        };
        let m1 = SubsystemModel::from_edge(&dgu).unwrap();
        let m2 = SubsystemModel::from_edge(&cons).unwrap();
        let x = [2.2e-3, 2.0e-3, 5.4e5, 0.7, 800.0];
        let (mut d1, mut d2) = ([0.0; 5], [0.0; 5]);
        let io1 = closed_loop_rhs(&m1, &x, 3e5, None, &mut d1);
        let io2 = closed_loop_rhs(&m2, &x, 3e5, None, &mut d2);
        assert_eq!(d1, d2);
        assert_eq!(io1, io2);
    }

    #[test]
    fn valve_mode_consumer_with_pump_is_rejected() {
        let pipe = PipeHydraulics::from_geometry(0.0359, 25.0, 4.5e-5).unwrap();
        let valve = table1_valve();
        let pp = PressurePump { pump: pressure_pump(), gains: pressure_gains(), setpoint: 6e5 };
        let bad = EdgeKind::Consumer {
            mode: ConsumerMode::Valve,
            pipe,
            valve,
            pressure_pump: Some(pp),
            flow_pump: None,
            valve_gains: Some(ValveFlowGains::new(1e3, 1e-4).unwrap()),
            flow_setpoint: 2e-3,
        };
        assert!(matches!(SubsystemModel::from_edge(&bad), Err(Error::ModeMismatch(_))));
    }
}

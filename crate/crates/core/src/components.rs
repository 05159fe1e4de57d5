//! Constitutive laws and open-loop dynamics of the DHN subsystems:
//! pumps, control valves, pipes, DGU/consumer circuits, mixing
//! connections, pressure holding units and capacitive nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{WATER_DENSITY, WATER_KINEMATIC_VISCOSITY};

/// Fixed ratio R_P/J_P of the second-order pump model.
pub const PUMP_RJ_RATIO: f64 = 7.2878;
/// Fixed product 1/(J_P C_P) of the second-order pump model.
pub const PUMP_JC_PRODUCT: f64 = 341.4283;

/// Black-box RLC parameters of the second-order pump model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpParams {
    /// Hydraulic resistance in Pa·s/m³.
    pub r_p: f64,
    /// Inertance in Pa·s²/m³.
    pub j_p: f64,
    /// Capacitance in m³/Pa.
    pub c_p: f64,
}

impl PumpParams {
    pub fn new(r_p: f64, j_p: f64, c_p: f64) -> Result<Self> {
        if r_p <= 0.0 || j_p <= 0.0 || c_p <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "pump parameters must be strictly positive (r_p = {r_p}, j_p = {j_p}, c_p = {c_p})"
            )));
        }
        Ok(Self { r_p, j_p, c_p })
    }

    /// Derive J_P and C_P from a configured R_P via the fixed model ratios.
    pub fn from_resistance(r_p: f64) -> Result<Self> {
        let j_p = r_p / PUMP_RJ_RATIO;
        let c_p = 1.0 / (PUMP_JC_PRODUCT * j_p);
        Self::new(r_p, j_p, c_p)
    }
}

/// Valve opening characteristic f_v(s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ValveCharacteristic {
    Linear,
    EqualPercentage { rangeability: f64 },
}

/// Control valve parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValveParams {
    /// Flow capacity in m³/(s·Pa^0.5).
    pub c_v: f64,
    pub characteristic: ValveCharacteristic,
    /// Lowest admissible stem position, in (0, 1].
    pub s_min: f64,
}

pub const DEFAULT_S_MIN: f64 = 0.05;

impl ValveParams {
    pub fn new(c_v: f64, characteristic: ValveCharacteristic, s_min: f64) -> Result<Self> {
        if c_v <= 0.0 {
            return Err(Error::InvalidParameter(format!("C_v must be positive, got {c_v}")));
        }
        if !(s_min > 0.0 && s_min <= 1.0) {
            return Err(Error::InvalidParameter(format!("s_min must lie in (0, 1], got {s_min}")));
        }
        if let ValveCharacteristic::EqualPercentage { rangeability } = characteristic {
            if rangeability <= 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "rangeability must exceed 1, got {rangeability}"
                )));
            }
        }
        Ok(Self { c_v, characteristic, s_min })
    }

    /// Opening characteristic f_v(s); f_v(1) = 1 for both kinds.
    pub fn opening(&self, s: f64) -> f64 {
        match self.characteristic {
            ValveCharacteristic::Linear => s,
            ValveCharacteristic::EqualPercentage { rangeability } => rangeability.powf(s - 1.0),
        }
    }

    /// Virtual control input u_v(s) = 1/f_v(s)².
    pub fn u_v_of_stem(&self, s: f64) -> Result<f64> {
        if s < self.s_min || s > 1.0 {
            return Err(Error::StemOutOfRange { s, s_min: self.s_min });
        }
        let f = self.opening(s);
        Ok(1.0 / (f * f))
    }

    /// Largest virtual input, reached at the minimum stem position.
    pub fn u_v_max(&self) -> f64 {
        let f = self.opening(self.s_min);
        1.0 / (f * f)
    }

    /// Flow-dependent part of the pressure drop, μ̂(q) = |q|q/C_v².
    pub fn mu_hat(&self, q: f64) -> f64 {
        q.abs() * q / (self.c_v * self.c_v)
    }

    /// Derivative dμ̂/dq = 2|q|/C_v².
    pub fn mu_hat_prime(&self, q: f64) -> f64 {
        2.0 * q.abs() / (self.c_v * self.c_v)
    }
}

/// Friction-law coefficients of λ(q) = a·|q|q + b·q.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrictionLaw {
    /// Turbulent coefficient in Pa·s²/m⁶.
    pub a: f64,
    /// Laminar coefficient in Pa·s/m³.
    pub b: f64,
}

/// Lumped hydraulic pipe element: inertance plus friction law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipeHydraulics {
    /// Inertance in Pa·s²/m³.
    pub j: f64,
    pub friction: FrictionLaw,
}

impl PipeHydraulics {
    pub fn new(j: f64, friction: FrictionLaw) -> Result<Self> {
        if j <= 0.0 {
            return Err(Error::InvalidParameter(format!("inertance must be positive, got {j}")));
        }
        if friction.a < 0.0 || friction.b <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "friction coefficients need a >= 0 and b > 0, got a = {}, b = {}",
                friction.a, friction.b
            )));
        }
        Ok(Self { j, friction })
    }

    /// Build from pipe geometry: inertance ρL/A and a Darcy–Weisbach friction fit.
    pub fn from_geometry(diameter: f64, length: f64, roughness: f64) -> Result<Self> {
        let friction = fit_friction(diameter, length, roughness)?;
        let area = std::f64::consts::PI * diameter * diameter / 4.0;
        Self::new(WATER_DENSITY * length / area, friction)
    }
}

/// Pressure loss λ(q) = a·|q|q + b·q; odd and strictly increasing.
pub fn friction(pipe: &PipeHydraulics, q: f64) -> f64 {
    pipe.friction.a * q.abs() * q + pipe.friction.b * q
}

/// Derivative dλ/dq = 2a|q| + b.
pub fn friction_prime(pipe: &PipeHydraulics, q: f64) -> f64 {
    2.0 * pipe.friction.a * q.abs() + pipe.friction.b
}

/// Darcy–Weisbach pressure drop with the Swamee–Jain friction factor,
/// used as the fitting target for [`fit_friction`].
pub fn darcy_weisbach_swamee_jain(diameter: f64, length: f64, roughness: f64, q: f64) -> f64 {
    let area = std::f64::consts::PI * diameter * diameter / 4.0;
    let v = q / area;
    let re = v.abs() * diameter / WATER_KINEMATIC_VISCOSITY;
    if re <= 0.0 {
        return 0.0;
    }
    let arg = roughness / (3.7 * diameter) + 5.74 / re.powf(0.9);
    let f = 0.25 / arg.log10().powi(2);
    f * (length / diameter) * WATER_DENSITY * v * v.abs() / 2.0
}

/// Least-squares fit of a·|q|q + b·q to the Darcy–Weisbach drop over
/// q ∈ [1e-5, 0.03] m³/s. b is floored by the laminar Hagen–Poiseuille
/// coefficient so λ stays strictly increasing near q = 0.
pub fn fit_friction(diameter: f64, length: f64, roughness: f64) -> Result<FrictionLaw> {
    if diameter <= 0.0 || length <= 0.0 || roughness <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "pipe geometry must be positive (d = {diameter}, l = {length}, k = {roughness})"
        )));
    }
    const N: usize = 256;
    const Q_LO: f64 = 1e-5;
    const Q_HI: f64 = 0.03;
    let (mut s4, mut s3, mut s2, mut m2, mut m1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..N {
        let t = k as f64 / (N - 1) as f64;
        let q = Q_LO * (Q_HI / Q_LO).powf(t);
        let dp = darcy_weisbach_swamee_jain(diameter, length, roughness, q);
        let q2 = q * q;
        s4 += q2 * q2;
        s3 += q2 * q;
        s2 += q2;
        m2 += q2 * dp;
        m1 += q * dp;
    }
    let det = s4 * s2 - s3 * s3;
    let a = (m2 * s2 - m1 * s3) / det;
    let b = (s4 * m1 - s3 * m2) / det;
    // Hagen-Poiseuille: dp = 128 rho nu L q / (pi D^4)
    let b_laminar = 128.0 * WATER_DENSITY * WATER_KINEMATIC_VISCOSITY * length
        / (std::f64::consts::PI * diameter.powi(4));
    Ok(FrictionLaw { a: a.max(0.0), b: b.max(b_laminar) })
}

/// Pressure drop of a valve at stem position s and flow q.
pub fn valve_drop(v: &ValveParams, s: f64, q: f64) -> Result<f64> {
    let u_v = v.u_v_of_stem(s)?;
    Ok(u_v * v.mu_hat(q))
}

/// Invert u_v(s) back to a stem position.
pub fn stem_from_input(v: &ValveParams, u_v: f64) -> Result<f64> {
    let u_v_max = v.u_v_max();
    if u_v < 1.0 || u_v > u_v_max {
        return Err(Error::ValveInputOutOfRange { u_v, u_v_max });
    }
    Ok(match v.characteristic {
        ValveCharacteristic::Linear => 1.0 / u_v.sqrt(),
        ValveCharacteristic::EqualPercentage { rangeability } => {
            1.0 - u_v.sqrt().ln() / rangeability.ln()
        }
    })
}

/// One interaction port sample: d is the input (pressure difference for
/// edges, net inflow for nodes), z the conjugate output (flow for edges,
/// pressure for nodes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortSample {
    pub d: f64,
    pub z: f64,
}

/// Pump dynamics: d/dt (J_P q_P, C_P p_P) with control input u_P and
/// interaction input d = -q. Returns time derivatives of (q_P, p_P).
pub fn pump_rhs(p: &PumpParams, state: (f64, f64), u_p: f64, d: f64) -> (f64, f64) {
    let (q_p, p_p) = state;
    ((-p_p - p.r_p * q_p + u_p) / p.j_p, (q_p + d) / p.c_p)
}

/// DGU/consumer circulation circuit: pipe + valve + pump in series.
/// State (q, q_P, p_P), inputs (u_v, u_P), interaction d = p_j - p_k.
pub fn dgu_consumer_rhs(
    pipe: &PipeHydraulics,
    valve: &ValveParams,
    pump: &PumpParams,
    state: (f64, f64, f64),
    u_v: f64,
    u_p: f64,
    d: f64,
) -> (f64, f64, f64) {
    let (q, q_p, p_p) = state;
    let q_dot = (p_p - friction(pipe, q) - valve.mu_hat(q) * u_v + d) / pipe.j;
    let (q_p_dot, p_p_dot) = pump_circuit_rhs(pump, q_p, p_p, u_p, q);
    (q_dot, q_p_dot, p_p_dot)
}

/// Pump inside a circulation circuit: the capacitor balances q_P against
/// the circuit flow q.
fn pump_circuit_rhs(pump: &PumpParams, q_p: f64, p_p: f64, u_p: f64, q: f64) -> (f64, f64) {
    (
        (-p_p - pump.r_p * q_p + u_p) / pump.j_p,
        (q_p - q) / pump.c_p,
    )
}

/// Pipe with booster pump. State (q, q_P, p_P); without a booster use
/// [`plain_pipe_rhs`] (single state, u_P = p_P = 0).
pub fn pipe_rhs(
    pipe: &PipeHydraulics,
    pump: &PumpParams,
    state: (f64, f64, f64),
    u_p: f64,
    d: f64,
) -> (f64, f64, f64) {
    let (q, q_p, p_p) = state;
    let q_dot = (p_p - friction(pipe, q) + d) / pipe.j;
    let (q_p_dot, p_p_dot) = pump_circuit_rhs(pump, q_p, p_p, u_p, q);
    (q_dot, q_p_dot, p_p_dot)
}

/// Pipe without booster pump: J q̇ = -λ(q) + d.
pub fn plain_pipe_rhs(pipe: &PipeHydraulics, q: f64, d: f64) -> f64 {
    (-friction(pipe, q) + d) / pipe.j
}

/// Mixing connection: pipe in series with a control valve, single state q.
pub fn mixing_rhs(pipe: &PipeHydraulics, valve: &ValveParams, q: f64, u_v: f64, d: f64) -> f64 {
    (-friction(pipe, q) - valve.mu_hat(q) * u_v + d) / pipe.j
}

/// Pressure holding node: pump model with d = net inflow, z = p_P.
pub fn holding_rhs(pump: &PumpParams, state: (f64, f64), u_p: f64, d: f64) -> (f64, f64) {
    pump_rhs(pump, state, u_p, d)
}

/// Capacitive node: C ṗ = net inflow.
pub fn capacitive_rhs(capacitance: f64, d: f64) -> f64 {
    d / capacitance
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn table1_pressure_pump() -> PumpParams {
        PumpParams::from_resistance(1e6).unwrap()
    }

    fn table1_valve() -> ValveParams {
        ValveParams::new(7.9e-5, ValveCharacteristic::Linear, 0.05).unwrap()
    }

    #[test]
    fn pump_param_ratios_match_construction() {
        let p = table1_pressure_pump();
        assert_relative_eq!(p.r_p / p.j_p, PUMP_RJ_RATIO, max_relative = 1e-12);
        assert_relative_eq!(1.0 / (p.j_p * p.c_p), PUMP_JC_PRODUCT, max_relative = 1e-12);
        // Table values, quoted to three digits.
        assert_relative_eq!(p.j_p, 1.37e5, max_relative = 5e-3);
        assert_relative_eq!(p.c_p, 2.13e-8, max_relative = 5e-3);
    }

    #[test]
    fn friction_at_zero_is_zero() {
        let pipe = PipeHydraulics::new(1e7, FrictionLaw { a: 1e9, b: 1e5 }).unwrap();
        assert_eq!(friction(&pipe, 0.0), 0.0);
    }

    #[test]
    fn friction_direct_evaluation() {
        let pipe = PipeHydraulics::new(1e7, FrictionLaw { a: 1e9, b: 1e5 }).unwrap();
        assert_relative_eq!(friction(&pipe, 1e-3), 1100.0, max_relative = 1e-12);
    }

    #[test]
    fn fit_friction_scales_linearly_with_length() {
        let f1 = fit_friction(0.0825, 100.0, 4.5e-5).unwrap();
        let f2 = fit_friction(0.0825, 200.0, 4.5e-5).unwrap();
        assert_relative_eq!(f2.a, 2.0 * f1.a, max_relative = 1e-9);
        assert_relative_eq!(f2.b, 2.0 * f1.b, max_relative = 1e-9);
    }

    // Frozen regression values for the DN 80 / 100 m fit, computed with the
    // brute-force Darcy-Weisbach oracle (see tests/common) when this module
    // was first written.
    #[test]
    fn fit_friction_dn80_regression() {
        let f = fit_friction(0.0825, 100.0, 4.5e-5).unwrap();
        assert_relative_eq!(f.a, FROZEN_DN80_100M_A, max_relative = 1e-9);
        assert_relative_eq!(f.b, FROZEN_DN80_100M_B, max_relative = 1e-9);
    }

    #[test]
    fn smaller_diameter_has_higher_turbulent_resistance() {
        let dn80 = fit_friction(0.0825, 25.0, 4.5e-5).unwrap();
        let dn32 = fit_friction(0.0359, 25.0, 4.5e-5).unwrap();
        assert!(dn32.a > dn80.a);
    }

    #[test]
    fn fit_friction_rejects_bad_geometry() {
        assert!(fit_friction(0.0, 100.0, 4.5e-5).is_err());
        assert!(fit_friction(0.08, -1.0, 4.5e-5).is_err());
    }

    #[test]
    fn valve_drop_at_kvs_is_one_bar() {
        let c_v = 0.025 / 1e5f64.sqrt();
        let v = ValveParams::new(c_v, ValveCharacteristic::Linear, 0.05).unwrap();
        assert_relative_eq!(valve_drop(&v, 1.0, 0.025).unwrap(), 1e5, max_relative = 1e-12);
    }

    #[test]
    fn valve_drop_zero_flow_any_stem() {
        let v = table1_valve();
        for s in [0.05, 0.3, 1.0] {
            assert_eq!(valve_drop(&v, s, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn valve_drop_equal_percentage() {
        let v = ValveParams::new(
            7.9e-5,
            ValveCharacteristic::EqualPercentage { rangeability: 50.0 },
            0.05,
        )
        .unwrap();
        let u_v = v.u_v_of_stem(0.5).unwrap();
        assert_relative_eq!(u_v, 50.0, max_relative = 1e-12);
        let mu = v.mu_hat(0.01);
        assert_relative_eq!(mu, 1e-4 / 6.241e-9, max_relative = 1e-12);
        assert_relative_eq!(valve_drop(&v, 0.5, 0.01).unwrap(), 50.0 * mu, max_relative = 1e-12);
        assert_relative_eq!(valve_drop(&v, 0.5, 0.01).unwrap(), 8.0115e5, max_relative = 1e-3);
    }

    #[test]
    fn valve_drop_rejects_stem_out_of_range() {
        let v = table1_valve();
        assert!(matches!(valve_drop(&v, 0.01, 1e-3), Err(Error::StemOutOfRange { .. })));
        assert!(matches!(valve_drop(&v, 1.2, 1e-3), Err(Error::StemOutOfRange { .. })));
    }

    #[test]
    fn stem_inversion_round_trip() {
        let lin = table1_valve();
        let eqp = ValveParams::new(
            7.9e-5,
            ValveCharacteristic::EqualPercentage { rangeability: 50.0 },
            0.05,
        )
        .unwrap();
        assert_eq!(stem_from_input(&lin, 1.0).unwrap(), 1.0);
        assert_eq!(stem_from_input(&eqp, 1.0).unwrap(), 1.0);
        assert_relative_eq!(stem_from_input(&lin, 4.0).unwrap(), 0.5, max_relative = 1e-12);
        assert_relative_eq!(stem_from_input(&eqp, 50.0).unwrap(), 0.5, max_relative = 1e-12);
        assert!(stem_from_input(&lin, 0.5).is_err());
        assert!(stem_from_input(&lin, 1e9).is_err());
    }

    #[test]
    fn pump_equilibrium_is_stationary() {
        let p = table1_pressure_pump();
        let (q_bar, p_bar) = (3e-3, 5e5);
        let u_p = p_bar + p.r_p * q_bar;
        let (dq, dp) = pump_rhs(&p, (q_bar, p_bar), u_p, -q_bar);
        assert_abs_diff_eq!(dq, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(dp, 0.0, epsilon = 1e-9);
        // unforced origin
        let (dq0, dp0) = pump_rhs(&p, (0.0, 0.0), 0.0, 0.0);
        assert_eq!((dq0, dp0), (0.0, 0.0));
    }

    #[test]
    fn dgu_consumer_equilibrium_is_stationary() {
        let pipe = PipeHydraulics::from_geometry(0.0359, 25.0, 4.5e-5).unwrap();
        let valve = table1_valve();
        let pump = table1_pressure_pump();
        let q_bar = 3e-3;
        let d_bar = 5e5;
        let u_v = 1.0;
        let p_p_bar = friction(&pipe, q_bar) + valve.mu_hat(q_bar) * u_v - d_bar;
        let u_p = p_p_bar + pump.r_p * q_bar;
        let (dq, dqp, dpp) =
            dgu_consumer_rhs(&pipe, &valve, &pump, (q_bar, q_bar, p_p_bar), u_v, u_p, d_bar);
        let scale = q_bar.abs().max(p_p_bar.abs());
        assert!(dq.abs() / scale < 1e-9 && dqp.abs() / scale < 1e-9 && dpp.abs() / scale < 1e-9);
    }

    #[test]
    fn dgu_with_disabled_valve_reduces_to_boosted_pipe() {
        let pipe = PipeHydraulics::from_geometry(0.0359, 25.0, 4.5e-5).unwrap();
        let valve = table1_valve();
        let pump = table1_pressure_pump();
        let state = (2e-3, 1e-3, 4e5);
        let a = dgu_consumer_rhs(&pipe, &valve, &pump, state, 0.0, 7e5, 1e4);
        let b = pipe_rhs(&pipe, &pump, state, 7e5, 1e4);
        assert_eq!(a, b);
    }

    #[test]
    fn capacitive_node_balanced_flow_is_stationary() {
        assert_eq!(capacitive_rhs(5e-10, 0.0), 0.0);
    }

    #[test]
    fn plain_pipe_equilibrium() {
        let pipe = PipeHydraulics::from_geometry(0.0825, 100.0, 4.5e-5).unwrap();
        let q = 4e-3;
        assert_eq!(plain_pipe_rhs(&pipe, q, friction(&pipe, q)), 0.0);
    }

    #[test]
    fn holding_equilibrium_matches_pump() {
        let pump = table1_pressure_pump();
        let d_bar = 1.5e-3; // net inflow absorbed by the holding unit
        let q_p_bar = -d_bar;
        let p_p_bar = 2e5;
        let u_p = p_p_bar + pump.r_p * q_p_bar;
        let (dqp, dpp) = holding_rhs(&pump, (q_p_bar, p_p_bar), u_p, d_bar);
        assert_abs_diff_eq!(dqp, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dpp, 0.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn friction_is_odd(q in -0.05f64..0.05) {
            let pipe = PipeHydraulics::new(1e7, FrictionLaw { a: 3.7e8, b: 4.1e4 }).unwrap();
            prop_assert!((friction(&pipe, -q) + friction(&pipe, q)).abs() <= 1e-12 * friction(&pipe, q).abs().max(1.0));
        }

        #[test]
        fn friction_and_mu_hat_strictly_monotone(q1 in -0.05f64..0.05, q2 in -0.05f64..0.05) {
            prop_assume!((q1 - q2).abs() > 1e-12);
            let pipe = PipeHydraulics::new(1e7, FrictionLaw { a: 3.7e8, b: 4.1e4 }).unwrap();
            let v = ValveParams::new(7.9e-5, ValveCharacteristic::Linear, 0.05).unwrap();
            prop_assert!((q1 - q2) * (friction(&pipe, q1) - friction(&pipe, q2)) > 0.0);
            prop_assert!((q1 - q2) * (v.mu_hat(q1) - v.mu_hat(q2)) > 0.0);
        }

        #[test]
        fn pump_rhs_is_linear(
            alpha in 0.0f64..1.0,
            x1 in (-1e-2f64..1e-2, -1e6f64..1e6),
            x2 in (-1e-2f64..1e-2, -1e6f64..1e6),
            u1 in -1e6f64..1e6,
            u2 in -1e6f64..1e6,
            d1 in -1e-2f64..1e-2,
            d2 in -1e-2f64..1e-2,
        ) {
            let p = PumpParams::from_resistance(1e6).unwrap();
            let mix = |a: f64, b: f64| alpha * a + (1.0 - alpha) * b;
            let lhs = pump_rhs(&p, (mix(x1.0, x2.0), mix(x1.1, x2.1)), mix(u1, u2), mix(d1, d2));
            let r1 = pump_rhs(&p, x1, u1, d1);
            let r2 = pump_rhs(&p, x2, u2, d2);
            let rhs = (mix(r1.0, r2.0), mix(r1.1, r2.1));
            prop_assert!((lhs.0 - rhs.0).abs() <= 1e-6 * lhs.0.abs().max(1.0));
            prop_assert!((lhs.1 - rhs.1).abs() <= 1e-6 * lhs.1.abs().max(1.0));
        }
    }

    // Values frozen from the first oracle run; the acceptance suite
    // cross-checks the fit against direct Darcy-Weisbach evaluation.
    const FROZEN_DN80_100M_A: f64 = 3.587369922153914e8;
    const FROZEN_DN80_100M_B: f64 = 2.602037709312894e5;
}

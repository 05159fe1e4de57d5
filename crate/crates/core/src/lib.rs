//! Hydraulic simulation of district heating networks (DHNs).
//!
//! A DHN is modeled as a typed digraph of port-interconnected subsystems:
//! DGU, consumer, pipe and mixing edges coupled through pressure-holding,
//! capacitive and junction nodes. Pumps and valves run decentralized
//! passivity-based pressure/flow controllers, and the crate ships the
//! machinery to verify the closed loop numerically: storage functions,
//! dissipation rates, equilibrium-independent passivity certificates,
//! power-balance audits and a Newton equilibrium oracle.
//!
//! Layout:
//! - [`components`]: constitutive laws and open-loop subsystem dynamics
//! - [`topology`]: graph build/validation, hydraulic layers, incidence partition
//! - [`control`]: the three controller laws and per-mode closed-loop dynamics
//! - [`sim`]: interconnected system assembly, junction solve, integration, events
//! - [`passivity`]: storage/dissipation evaluators, certificates, equilibrium solver
//! - [`config`]: network/scenario/state file formats and bundled fixtures

pub mod components;
pub mod config;
pub mod control;
pub mod error;
pub mod passivity;
pub mod sim;
pub mod topology;

pub use error::{Error, Result};

/// Water density at 55 °C in kg/m³.
pub const WATER_DENSITY: f64 = 983.0;
/// Kinematic viscosity of water at 55 °C in m²/s.
pub const WATER_KINEMATIC_VISCOSITY: f64 = 4.7e-7;

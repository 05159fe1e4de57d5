use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no nodes")]
    NoNodes,

    #[error("edge {edge} references missing node {node}")]
    DanglingEdge { edge: u32, node: u32 },

    #[error("edge {0} has identical source and target")]
    SelfLoop(u32),

    #[error("duplicate subsystem id {0}")]
    DuplicateId(String),

    #[error("unknown subsystem '{0}'")]
    UnknownSubsystem(String),

    #[error("stem out of range: s = {s}, valid [{s_min}, 1]")]
    StemOutOfRange { s: f64, s_min: f64 },

    #[error("valve input out of range: u_v = {u_v}, valid [1, {u_v_max}]")]
    ValveInputOutOfRange { u_v: f64, u_v_max: f64 },

    #[error("gain condition violated: Q_I(K_P + 1) - C_P = {kappa} <= 0")]
    GainCondition { kappa: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("network validation failed:\n{0}")]
    Validation(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("infeasible setpoints: {0}")]
    Infeasible(String),

    #[error("numeric abort at t = {time}: {detail}")]
    Numeric { time: f64, detail: String },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

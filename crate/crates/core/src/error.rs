use std::path::PathBuf;

use thiserror::Error;

/// A violated [`AgentDesign`](crate::agent::AgentDesign) invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("design has no nodes")]
    Empty,
    #[error("spring {spring}: degenerate spring endpoints ({node}, {node})")]
    DegenerateSpring { spring: usize, node: usize },
    #[error("spring {spring}: node index {node} out of range (design has {count} nodes)")]
    NodeOutOfRange {
        spring: usize,
        node: usize,
        count: usize,
    },
    #[error("spring {spring}: duplicate of spring {first} between nodes ({a}, {b})")]
    DuplicateSpring {
        spring: usize,
        first: usize,
        a: usize,
        b: usize,
    },
    #[error("spring {spring}: rest length must be strictly positive, got {length}")]
    NonPositiveRestLength { spring: usize, length: f64 },
    #[error("node {node}: mass must be positive and finite, got {mass}")]
    NonPositiveMass { node: usize, mass: f64 },
    #[error("spring {spring}: stiffness must be non-negative and finite, got {stiffness}")]
    InvalidStiffness { spring: usize, stiffness: f64 },
    #[error("node {node}: coordinates are not finite")]
    NonFiniteNode { node: usize },
    #[error("node_mass has {got} entries for {expected} nodes")]
    MassCountMismatch { got: usize, expected: usize },
    #[error("actuator group {group}: member {member} out of range ({count} available)")]
    GroupMemberOutOfRange {
        group: usize,
        member: usize,
        count: usize,
    },
    #[error("actuator group {group} is empty")]
    EmptyGroup { group: usize },
    #[error("{member} belongs to actuator groups {first} and {second}")]
    MultipleGroups {
        member: usize,
        first: usize,
        second: usize,
    },
    #[error("spring {spring} is actuated but belongs to no actuator group")]
    UngroupedActuator { spring: usize },
    #[error("spring {spring} is in actuator group {group} but is not actuated")]
    PassiveSpringInGroup { spring: usize, group: usize },
    #[error("design has no actuator groups")]
    NoActuators,
    #[error("mpm designs carry particles only; found {count} springs")]
    SpringsInMpmDesign { count: usize },
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: malformed design file at line {line}, column {column} (field `{field}`): {message}")]
    MalformedDesign {
        path: PathBuf,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("invalid design: {0}")]
    Design(#[from] DesignError),
    #[error("simulation diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("grid window: {0}")]
    Window(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite output in {layer} layer")]
    Numeric { layer: &'static str },
    #[error("gradient explosion: first non-finite adjoint at step {step}")]
    GradientExplosion { step: usize },
    #[error("velocity estimate needs t >= {window}, got t = {t}")]
    OutOfWindow { t: usize, window: usize },
    #[error("period {period} is incomplete: history has {available} samples, needs {required}")]
    IncompletePeriod {
        period: usize,
        available: usize,
        required: usize,
    },
    #[error("rollout failed (goal {goal:?}): {source}")]
    Rollout {
        goal: Option<crate::objectives::Goal>,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error means the dynamics (or their adjoint) left the finite range.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Diverged { .. } | Error::GradientExplosion { .. } | Error::Numeric { .. } => {
                true
            }
            Error::Rollout { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

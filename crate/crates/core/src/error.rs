use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("communication graph is not connected (agent {0} unreachable from agent 0)")]
    DisconnectedGraph(usize),
    #[error("agent index {index} out of range for {n} agents")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("self-loop ({0}, {0}) in edge list; self-loops are implicit")]
    SelfLoop(usize),
    #[error("graph must contain at least one agent")]
    EmptyGraph,

    #[error("agent {agent}: kernel row (state {state}, action {action}) sums to {sum}")]
    KernelRowNotStochastic { agent: usize, state: usize, action: usize, sum: f64 },
    #[error("agent {agent}: {what} space is empty")]
    EmptySpace { agent: usize, what: &'static str },
    #[error("label {label} out of range for agent {agent} ({what} space has {size} labels)")]
    LabelOutOfRange { agent: usize, label: usize, size: usize, what: &'static str },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("reward domain of agent {agent} has {size} entries; too large to enumerate")]
    RewardDomainTooLarge { agent: usize, size: u128 },

    #[error("missing parameters of agent {0}")]
    MissingNeighborParams(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("coupled policies need homogeneous state/action spaces: {0}")]
    HeterogeneousSpaces(String),

    #[error("success probability {0} outside (0, 1]")]
    InvalidProbability(f64),
    #[error("rollout horizon {0} exceeds the cap")]
    HorizonOverflow(u64),
    #[error("agent {agent}: gradient norm {norm} exceeds the bound {bound}")]
    BoundViolated { agent: usize, norm: f64, bound: f64 },

    #[error("push-sum weight of agent {agent} is {value}")]
    NonPositiveWeight { agent: usize, value: f64 },
    #[error("invariant violated: {0}")]
    InvariantViolated(String),

    #[error("joint space has {0} states; too large for exact enumeration")]
    SpaceTooLarge(u128),

    #[error("unknown location {0:?}")]
    UnknownLocation(String),
    #[error("noise power of agent {agent} is {value}; must be positive")]
    NonPositiveNoise { agent: usize, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("level `{level}` is not in the domain of `{variable}`")]
    UnknownLevel { variable: String, level: String },
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("invalid variable: {0}")]
    InvalidVariable(String),
    #[error("edge {from} -> {to} would create a cycle")]
    Cycle { from: String, to: String },
    #[error("edge {from} -> {to} already present")]
    DuplicateEdge { from: String, to: String },
    #[error("self-loop on `{0}`")]
    SelfLoop(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),
    #[error("inconsistent domain knowledge: {0}")]
    InconsistentKnowledge(String),
    #[error("invalid assumptions: {0}")]
    InvalidAssumptions(String),
    #[error("dataset is empty")]
    EmptyData,
    #[error("joint state space of {0} states exceeds the enumeration limit")]
    StateSpaceTooLarge(u128),
    #[error("invalid SCM specification: {0}")]
    InvalidSpec(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

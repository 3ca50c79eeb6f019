use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CausalError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("duplicate node {0}")]
    DuplicateNode(String),
    #[error("graph has a cycle through {0}")]
    Cycle(String),
    #[error("selection node {0} has parents")]
    SelectionWithParents(String),
    #[error("{0} is not a selection node")]
    NotSelection(String),
    #[error("node {0} appears in more than one of the query sets")]
    OverlappingSets(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid model: {0}")]
    Model(String),
    #[error("state space of {0} configurations exceeds the enumeration limit")]
    StateSpace(u128),
    #[error("conditioning event has probability zero: {0}")]
    ZeroProbability(String),
    #[error("graph does not have the required structure: {0}")]
    Structure(String),
}

pub type Result<T> = std::result::Result<T, CausalError>;

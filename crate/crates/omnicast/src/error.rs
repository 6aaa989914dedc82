use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("coordinate {index} = {value} lies outside [0, 1]")]
    Domain { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("action set is empty")]
    EmptyActions,
    #[error("basis family does not match loss: {0}")]
    FamilyMismatch(String),
    #[error("size {size} exceeds budget {budget}")]
    Budget { size: usize, budget: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("solver: {0}")]
    Solver(String),
}

pub type Result<T> = std::result::Result<T, Error>;

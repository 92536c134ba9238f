use thiserror::Error;

/// Errors produced by the therapy pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("time {time} s outside [{start}, {end}] s")]
    OutOfRange { time: f64, start: f64, end: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation diverged at step {step} (t = {time} s)")]
    Diverged { step: usize, time: f64 },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate mixture component {component} (weight {weight:e})")]
    DegenerateComponent { component: usize, weight: f64 },

    #[error("conditioning failed at t = {time} s: {reason}")]
    Conditioning { time: f64, reason: String },

    #[error("ill-conditioned kernel system (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("force events are not time-sorted at index {index}")]
    Unsorted { index: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("scenario invalid: {0}")]
    Scenario(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Scenario(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

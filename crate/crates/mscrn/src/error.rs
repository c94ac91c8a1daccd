//! Error types shared by every stage of the pipeline.

use std::fmt;

/// Location of a diagnostic inside a model file. Lines and columns are 1-based and
/// `end_col` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Span {
    pub line: usize,
    pub col: usize,
    pub end_col: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}-{}", self.line, self.col, self.end_col)
    }
}

fn at(span: &Option<Span>) -> String {
    span.map(|s| format!(" at {s}")).unwrap_or_default()
}

/// Every failure the library can report.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("parse error at {span}: {message}")]
    Parse { message: String, span: Span },
    #[error("validation error{}: {message}", at(.span))]
    Validation { message: String, span: Option<Span> },
    #[error("model error: {0}")]
    Model(String),
    #[error("rate of reaction {reaction} could not be evaluated: {detail}")]
    RateEvaluation { reaction: usize, detail: String },
    #[error("unclassifiable scaling: {0}")]
    Unclassifiable(String),
    #[error("conserved quantity {index} mixes abundance exponents {alphas:?}")]
    MixedAlpha { index: usize, alphas: Vec<String> },
    #[error("conserved quantity {index} changes on a faster time scale than its abundance: {detail}")]
    TimescaleViolation { index: usize, detail: String },
    #[error("reactions {reactions:?} act on both a conserved quantity and a slow species")]
    Overlap { reactions: Vec<usize> },
    #[error("movement exponent equal to one for the {tier} tier")]
    DegenerateEta { tier: String },
    #[error("species of the {tier} tier move on different time scales: {detail}")]
    HeterogeneousEta { tier: String, detail: String },
    #[error("movement chain of species {species} has {classes} closed classes")]
    ReducibleChain { species: String, classes: usize },
    #[error("species {species} cannot move between compartments")]
    IsolatedSpecies { species: String },
    #[error("event cap of {cap} exceeded at t={time}")]
    EventCapExceeded { cap: u64, time: f64 },
    #[error("ODE step failed at t={time}: {detail}")]
    OdeStepFailure { time: f64, detail: String },
    #[error("negative state at t={time}: coordinate {coordinate} = {value}")]
    NegativeRate { time: f64, coordinate: usize, value: f64 },
    #[error("reduced model has no rate for reaction {reaction}")]
    MissingRates { reaction: usize },
    #[error("no analytic stationary measure: {0}")]
    AnalyticUnavailable(String),
    #[error("stationary estimate looks non-ergodic: effective sample size {ess:.1}")]
    NonErgodicSuspected { ess: f64 },
    #[error("averaging case unavailable: {0}")]
    CaseUnavailable(String),
    #[error("reaction {reaction} does not have a mass-action rate law")]
    NotMassAction { reaction: usize },
    #[error("initial state is not a valid count vector: {0}")]
    InvalidInitialState(String),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EventCapExceeded { .. }
            | Error::OdeStepFailure { .. }
            | Error::NegativeRate { .. }
            | Error::NonErgodicSuspected { .. }
            | Error::RateEvaluation { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn validation(message: impl Into<String>) -> Self {
        Error::Validation { message: message.into(), span: None }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

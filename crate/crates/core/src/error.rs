use std::fmt;

/// A single rule broken by one input row.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Zero-based row index within the submitted subjects.
    pub row: usize,
    pub rule: Rule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    TruncationExceedsObserved,
    NegativeTime,
    NonFiniteValue,
    DimensionMismatch,
    EventAtEntry,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::TruncationExceedsObserved => "truncation exceeds observed time",
            Rule::NegativeTime => "negative or zero time",
            Rule::NonFiniteValue => "non-finite value",
            Rule::DimensionMismatch => "inconsistent covariate dimension",
            Rule::EventAtEntry => "event observed at entry (zero residual time)",
        };
        f.write_str(s)
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, row {}", self.rule, self.row)
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid cohort: {}", join_violations(.0))]
    Validation(Vec<Violation>),

    #[error("invalid cohort: no events")]
    NoEvents,

    #[error("invalid cohort: no subjects")]
    EmptyCohort,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("degenerate weight: zero integrated censoring survivor at residual time {residual}")]
    DegenerateWeight { residual: f64 },

    #[error("singular risk set at event time {time}")]
    SingularRiskSet { time: f64 },

    #[error("bracket expansion failed at event time {time}")]
    BracketFailure { time: f64 },

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unstable contamination at zeta = {zeta}: {dropped} of {total} fits dropped")]
    UnstableContamination { zeta: f64, dropped: usize, total: usize },

    #[error("non-convergence: {0}")]
    NonConvergence(String),

    #[error("scenario infeasible: {0}")]
    ScenarioInfeasible(String),

    #[error("censoring calibration range does not straddle target {target}")]
    CalibrationRange { target: f64 },

    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error stems from the data or configuration rather than
    /// the numerics or the filesystem.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Validation(_)
                | Error::NoEvents
                | Error::EmptyCohort
                | Error::InvalidCovariance(_)
                | Error::Config(_)
                | Error::Csv { .. }
                | Error::CalibrationRange { .. }
                | Error::ScenarioInfeasible(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed portfolio/table CSV input. `row` is the 1-based file line.
    #[error("csv row {row}: {msg}")]
    CsvRow { row: usize, msg: String },

    /// A policy failed its parameter validity checks.
    #[error("policy {id}: {msg}")]
    InvalidPolicy { id: String, msg: String },

    #[error("portfolio is empty")]
    EmptyPortfolio,

    #[error("delta vector has length {got}, portfolio has {expected} policies")]
    Alignment { got: usize, expected: usize },

    /// A renewal probability left (0,1); the parameters are not valid on the
    /// requested change box.
    #[error("renewal probability {value} outside (0,1) at delta {delta}")]
    PsiOutOfRange { value: f64, delta: f64 },

    /// Discrete-table lookup at a delta that is not a grid point.
    #[error("no table entry for delta {delta}")]
    TableLookup { delta: f64 },

    /// Analytic derivatives requested for the discrete table model.
    #[error("derivatives are undefined for the discrete table model")]
    DiscreteModelDerivative,

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The constraint set admits no point; the message carries the
    /// farthest-feasible diagnostic.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver failure: {0}")]
    Solver(String),

    /// Rejection sampling exhausted its budget without one feasible draw.
    #[error("no feasible sample within budget: {0}")]
    NoFeasibleSample(String),

    #[error("instance too large: {0}")]
    InstanceTooLarge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn solver(msg: impl Into<String>) -> Self {
        Error::Solver(msg.into())
    }

    pub(crate) fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
}

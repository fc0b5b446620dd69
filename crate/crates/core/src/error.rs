use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix dimensions must be at least 1x1, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("cannot normalize a vector with norm {norm:e}")]
    ZeroVector { norm: f64 },

    #[error("expected a unit vector, got norm {norm}")]
    NotUnit { norm: f64 },

    #[error("requested rank {rank} exceeds min dimension {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("invalid adapter init spec: {0}")]
    BadSpec(String),

    #[error("angle {0} outside the open interval (0, 1)")]
    BadAngle(f64),

    #[error("operation requires finite-sample data but the task is in population mode")]
    PopulationMode,

    #[error("operation requires population mode but the task is finite-sample")]
    FiniteSampleMode,

    #[error("degenerate design: a^T X^T X a = {value:e} <= {threshold:e}")]
    DegenerateDesign { value: f64, threshold: f64 },

    #[error("bad partition: {0}")]
    BadPartition(String),

    #[error("frozen factor of client {client} differs from the broadcast copy (max abs diff {diff:e})")]
    FrozenFactorMismatch { client: usize, diff: f64 },

    #[error("divergence detected at round {round}: loss {loss:e}")]
    DivergenceDetected { round: usize, loss: f64 },

    #[error("step size {eta} exceeds the allowed maximum {max}")]
    StepTooLarge { eta: f64, max: f64 },

    #[error("argument out of range: {0}")]
    BadRange(String),

    #[error("trace schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("malformed IDX file: {0}")]
    IdxFormat(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid value for `{field}`: {msg}")]
    Validation { field: String, msg: String },

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Process exit status: 1 configuration, 2 I/O, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::IdxFormat(_) => 2,
            Error::DivergenceDetected { .. } | Error::DegenerateDesign { .. } | Error::ZeroVector { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

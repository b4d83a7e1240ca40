use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "training diverged (non-finite loss) at epoch {epoch}, batch {batch}; learning rate {lr} is likely too large"
    )]
    Divergence { epoch: usize, batch: usize, lr: f64 },

    #[error("round {round}, client {client}: {source}")]
    ClientFailure {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("APH head {head} diverged after {attempts} attempts")]
    HeadDiverged { head: usize, attempts: usize },

    #[error("cannot partition {samples} samples into {clients} nonempty clients")]
    Partition { clients: usize, samples: usize },

    #[error("label-requiring metric received out-of-distribution sentinel labels (client {client})")]
    SentinelLabels { client: usize },

    #[error("CIFAR-10 file length {len} is not a multiple of the 3073-byte record size; trailing partial record starts at byte offset {offset}")]
    CifarLength { len: usize, offset: usize },

    #[error("CIFAR-10 record {record} has label byte {label}, expected 0-9")]
    CifarLabel { record: usize, label: u8 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config: {path}: {message}")]
    Config { path: String, message: String },

    #[error("unknown suite '{0}'")]
    UnknownSuite(String),

    #[error("missing input {}: {what}", path.display())]
    MissingInput { path: PathBuf, what: &'static str },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

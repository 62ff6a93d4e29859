use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite value in {name} at row {row}, column {col}")]
    NonFinite {
        name: String,
        row: usize,
        col: usize,
    },

    #[error("run {model_id}/{run_id}: {message}")]
    Run {
        model_id: String,
        run_id: String,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("preprocessing: {0}")]
    Preprocessing(String),

    #[error("anchor expansion is rank deficient; dependent columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::NonFinite { .. }
            | Error::Dimension(_)
            | Error::Preprocessing(_)
            | Error::RankDeficient { .. }
            | Error::Singular(_)
            | Error::UndefinedStatistic(_) => 3,
            _ => 1,
        }
    }
}

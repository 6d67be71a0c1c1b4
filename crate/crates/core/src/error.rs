use std::path::PathBuf;

/// Error type shared by all modules of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("cell at row {row}, column '{column}' is not a finite number: '{value}'")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("environment '{label}' has only {count} observation(s), need at least {min}")]
    EnvironmentTooSmall {
        label: String,
        count: usize,
        min: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular design on subset {subset:?}")]
    SingularDesign { subset: Vec<usize> },

    #[error("underdetermined fit: {rows} rows for {params} parameters")]
    Underdetermined { rows: usize, params: usize },

    #[error("degrees of freedom not positive in {context}")]
    DegreesOfFreedom { context: String },

    #[error("no candidate sets to score")]
    EmptyCandidates,

    #[error("bootstrap refits kept hitting singular designs ({attempts} attempts)")]
    BootstrapExhausted { attempts: usize },

    #[error("too many failed subsamples: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("empty truth set: recovery curve undefined")]
    EmptyTruthSet,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

use crate::dsl::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: column `{column}` not found in header")]
    MissingColumn { column: String },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("student `{student}`: {message}")]
    Validation { student: String, message: String },

    #[error("model formula: {0}")]
    Parse(#[from] ParseError),

    #[error("singular design: column `{column}` is collinear with [{}]", others.join(", "))]
    Collinear { column: String, others: Vec<String> },

    #[error("empty design: {0}")]
    EmptyDesign(String),

    #[error("inner fit failed at {params}: {source}")]
    Candidate {
        params: String,
        #[source]
        source: Box<Error>,
    },

    #[error("cross-validation: {0}")]
    Cv(String),

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn row(row: usize, message: impl Into<String>) -> Self {
        Error::Row {
            row,
            message: message.into(),
        }
    }
}

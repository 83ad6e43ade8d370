//! Crate-wide error type.
//!
//! Variants are grouped into three failure classes mirrored by the CLI exit
//! codes: usage/config (1), data (2), numeric (3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: duplicate document id {id:?}")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },

    #[error("document {doc_id:?} carries label ids unknown to the ontology: {ids:?}")]
    UnknownLabels { doc_id: String, ids: Vec<String> },

    #[error("ontology contains a cycle: {0}")]
    OntologyCycle(String),

    #[error("invalid ontology edge {child} -> {parent}: {msg}")]
    InvalidEdge {
        child: String,
        parent: String,
        msg: String,
    },

    #[error("document {id:?} has no usable tokens after preprocessing")]
    EmptyDocument { id: String },

    #[error("degenerate query for document {id:?}: {msg}")]
    DegenerateQuery { id: String, msg: String },

    #[error("query vector has zero norm")]
    ZeroNormQuery,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing artifact {path}; run `meshdex {producer}` first")]
    MissingArtifact { path: String, producer: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Exit code class for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Parse { .. }
            | Error::DuplicateId { .. }
            | Error::UnknownLabels { .. }
            | Error::OntologyCycle(_)
            | Error::InvalidEdge { .. }
            | Error::EmptyDocument { .. }
            | Error::InvalidInput(_)
            | Error::MissingArtifact { .. }
            | Error::Io { .. } => 2,
            Error::DegenerateQuery { .. }
            | Error::ZeroNormQuery
            | Error::ShapeMismatch(_)
            | Error::NonFiniteLoss { .. } => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

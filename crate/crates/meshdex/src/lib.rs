//! Semantic indexing of biomedical documents.
//!
//! The pipeline assigns major index headings and supplementary concepts to
//! documents in five stages: preprocessing, candidate retrieval over an
//! annotated neighbor index, a bidirectional transformer scoring candidates
//! through document-index cross-attention, per-index threshold fitting, and
//! flat plus hierarchical evaluation. Self-supervised masked-language-model
//! pretraining on an unlabeled corpus warm-starts the transformer.

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod synthetic;
pub mod textprep;
pub mod thresholds;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};

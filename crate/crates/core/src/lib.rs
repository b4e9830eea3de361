//! Pull-request driven README maintenance.
//!
//! Given a pull request, the pipeline decides whether the repository README
//! needs an update, localises the paragraph-level sections that went stale,
//! and justifies each pick. Around the pipeline sit the pieces needed to
//! measure it: a corpus format and forge client, a dataset builder with
//! outlier filtering, and the evaluation metrics.
//!
//! Numeric code (metrics, similarity scoring, quartiles) is generic over
//! [`Scalar`]; the aliases at the crate root pin it to `f64`.

pub mod clock;
pub mod corpus;
pub mod dataset;
pub mod diff;
pub mod forge;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod readme;
pub mod retrieval;
pub mod scalar;

pub use scalar::Scalar;

pub use corpus::{Commit, FilePatch, GroundTruth, PullRequest};

pub use readme::{HierarchyTree, ReadmeDocument, Section};

/// Section-level similarity scores in double precision.
pub type PatchScore = retrieval::PatchScore<f64>;
/// Evaluation summary in double precision.
pub type MetricsReport = metrics::MetricsReport<f64>;
/// Evaluation summary in single precision.
pub type MetricsReport32 = metrics::MetricsReport<f32>;

pub use llm::{ChatBackend, LlmGateway, RecordingBackend, ScriptedBackend};
pub use pipeline::{PipelineConfig, Recommendation};
pub use retrieval::{EmbeddingBackend, HashedBagOfWords, RetrievalWindow};

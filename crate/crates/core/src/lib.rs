//! Personalized meditation guidance: safety templates with automatic
//! checkers, pre-session reflection, script personalization, session
//! lifecycle and the statistics used to evaluate it.
//!
//! Numeric modules are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix them to `f64`.

pub mod concept_kb;
pub mod analytics;
pub mod forge;
pub mod personalization;
pub mod providers;
pub mod reflection;
pub mod scalar;
pub mod script;
pub mod study;
pub mod session;
pub mod text;
pub mod vector_index;

pub type Embedding = providers::EmbeddingVector<f64>;
pub type VectorIndex = vector_index::VectorStore<f64>;
pub type IndexHit = vector_index::QueryHit<f64>;
pub type TestResult = analytics::TestResult<f64>;
pub type EngagementSummary = analytics::EngagementSummary<f64>;

//! Segmentation, classification and Shapley-based explanation of
//! semi-structured psychosis-risk interviews.
//!
//! The crate is organised as one module per pipeline stage:
//!
//! * [`corpus`] - transcript ingestion, validation and synthetic corpora.
//! * [`segmenter`] - fuzzy mapping of interviewer turns to the 15 PSYCHS domains.
//! * [`summarizer`] - two-pass third-person summary prompts and an offline fallback.
//! * [`gateway`] - client contract for an external text-generation service.
//! * [`classifier`] - tokenisation, chunking, a class-weighted linear model and vote aggregation.
//! * [`attribution`] - exact, closed-form and sampled Shapley values plus aggregation.
//! * [`explainer`] - the five rendered explanation formats and per-transcript bundles.
//! * [`evaluation`] - grouped splits, nested cross-validation, metrics and ablations.
//! * [`feedback`] - clinician rating statistics.
//! * [`pipeline`] - end-to-end orchestration shared by the CLI and the test-suite.

pub mod attribution;
pub mod classifier;
pub mod corpus;
pub mod domain;
pub mod evaluation;
pub mod explainer;
pub mod feedback;
pub mod gateway;
pub mod hashing;
pub mod pipeline;
pub mod segmenter;
pub mod summarizer;
pub mod text;

pub use domain::DomainId;

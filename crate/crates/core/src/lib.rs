//! Two-stage LLM annotation engine for multi-label image tagging.
//!
//! The pipeline first asks a multimodal model which of a group of candidate
//! categories appear in an image (one multi-option query per group of a
//! partitioned vocabulary), then verifies each surviving candidate with a
//! disambiguated yes/no query. Alongside the pipeline the crate ships the
//! supporting machinery: vocabulary and label algebra, byte-exact prompt
//! rendering, label-space partitioning, a chat-completion HTTP backend with
//! retry and concurrency control, a deterministic simulated annotator for
//! offline verification, and a full annotation-quality evaluation suite.

pub mod backend;
pub mod concepts;
pub mod error;
pub mod eval;
pub mod partition;
pub mod pipeline;
pub mod prompt;
pub mod testing;
pub mod vocab;

mod hash;

pub use error::{Error, Result};

//! Gradient-free instruction-tuning data selection.
//!
//! Each candidate sample is scored by how much it lowers the perplexity of
//! held-out assessment responses when placed in context as a demonstration,
//! relative to a random control of the same token length and normalized by
//! the item's own perplexity. Samples are then ranked, the top K% selected,
//! and a lightweight classifier can be trained on those labels to select
//! from larger pools in a single local pass.
//!
//! Modules:
//! * [`corpus`]: samples, assessment-set construction, disjointness checks
//! * [`lm_backend`]: log-probability backends, persistent cache, accounting
//! * [`scoring`]: perplexities, task and global contribution scores
//! * [`selection`]: top-K, baselines, the trained selector, exports
//! * [`analysis`]: difficulty, pairwise judgments, distribution reports

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod jsonl;
pub mod lm_backend;
mod parallel;
pub mod scoring;
pub mod selection;

pub use error::{AnalysisError, BackendError, CorpusError, ScoringError, SelectionError};

//! Auditing search interaction logs for differences in measured user
//! satisfaction across demographic groups.
//!
//! The crate computes per-impression satisfaction metrics, compares groups
//! through several lenses (raw aggregates, context-matched cohorts, a
//! multilevel GLM that controls for query difficulty, and a pairwise
//! comparison model), and ships a synthetic log generator with planted
//! ground truth for validating all of them.

pub mod aggregate;
pub mod audit;
pub mod difficulty;
pub mod error;
pub mod glm;
pub mod logmodel;
pub mod matching;
pub mod metrics;
pub mod mlm;
pub mod pairwise;
pub mod report;
pub mod synth;

pub use error::{AuditError, Result};

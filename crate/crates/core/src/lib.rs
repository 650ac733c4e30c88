//! Cascaded, rule-based video anomaly detection.
//!
//! Offline, [`induction`] turns normal footage into natural-language rules
//! held in a versioned [`rulebase`]. Online, [`cascade`] gates frames on
//! motion, scores prompted frames against the candidate pool in image space,
//! and escalates suspicious ones to a captioner whose output is scored again
//! in text space. [`evolution`] feeds results back into the rulebase and
//! [`eval`] measures the whole thing.

pub mod backends;
pub mod cascade;
pub mod error;
pub mod eval;
pub mod evolution;
pub mod frames;
pub mod induction;
pub mod motion;
pub mod rulebase;
pub mod scoring;
pub mod synth;

mod par;

pub use error::{Error, Result};

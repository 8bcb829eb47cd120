//! Two-stage policy-gradient network compression.
//!
//! A bidirectional recurrent policy decides which layers of a teacher network
//! to remove, then an autoregressive policy decides how far to shrink each
//! remaining layer. Candidates are scored by distilling a student and
//! combining its accuracy with the achieved compression.

pub mod adam;
pub mod arch;
pub mod config;
pub mod data;
pub mod engine;
pub mod eval;
pub mod orchestrator;
pub mod pg;
pub mod policy;
pub mod reward;
pub mod seed;

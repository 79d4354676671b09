//! Multi-source multi-task representation learning: per-task sub-backbones
//! joined by stop-gradient reconciliation links, then squeezed into one
//! sub-backbone-sized student.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod expansion;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod reconciliation;
pub mod report;
pub mod schedule;
pub mod squeeze;

pub use error::{Error, Result};

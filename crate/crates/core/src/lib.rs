//! Closed-loop evolution of Text-to-SQL agent packages.
//!
//! Agents compete on sampled databases and questions, are ranked with ELO via
//! pairwise decomposition, and the strongest feed an evolution backend that
//! produces the next challenger.

pub mod analyzer;
pub mod chat;
pub mod elo;
pub mod error;
pub mod eval;
pub mod evolution;
pub mod generation;
pub mod orchestrator;
pub mod registry;
pub mod scheduler;
pub mod toy;

pub use error::{Error, Result};

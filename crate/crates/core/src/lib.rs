//! Automated prompt optimization for emotion diagnosis: a risk- and
//! cost-aware Planner, a Teacher/Critic/Student refinement loop and a Target
//! evaluator with reward-based early stopping.

pub mod agents;
pub mod backend;
pub mod data;
pub mod domain;
pub mod error;
pub mod evaluator;
pub mod metrics;
pub mod persistence;
pub mod planner;
pub mod socratic;
pub mod toy;

pub use error::{Error, Result};

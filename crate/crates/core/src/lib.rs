//! REPlan at desk scale: goal-conditioned RL where subgoals live in a
//! disentangled scene-latent space, plans are scored by a learned
//! temporal-reachability classifier, and exploration earns
//! reachability-based curiosity bonuses.
//!
//! Interchangeable pieces (scene encoders, plan edge scorers, plan
//! aggregators, relabel strategies, layouts) sit behind traits and are
//! selected by name through the run configuration.

pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod geom;

pub use config::Config;
pub use error::{ReplanError, Result};

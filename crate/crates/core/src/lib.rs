//! Deterministic simulator for federated sparse learning.
//!
//! Clients train masked networks with prune/regrow sparse learning; the
//! server aggregates and maintains the global sparse mask. Warm-up driven
//! sensitivity masks, heterogeneous client densities, and exact
//! communication and FLOPs accounting are included.

pub mod accounting;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod learner;
pub mod mask;
pub mod model;
pub mod rng;
pub mod tensor;

pub use config::{Aggregation, Algorithm, FederationConfig};
pub use error::{FlashError, Result};

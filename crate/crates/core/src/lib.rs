//! Multi-modal contrastive embedding engine.
//!
//! Pools per-modality feature sequences, projects them into a shared space
//! through gated heads, trains them with contrastive losses over N x M clip
//! batches, and evaluates cross-modal retrieval and per-dimension concepts.

mod binio;
pub mod concepts;
pub mod error;
pub mod features;
pub mod frontend;
pub mod losses;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod sampler;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};

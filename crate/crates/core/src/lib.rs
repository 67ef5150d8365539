//! Slow-fast collaborative sequential recommendation.
//!
//! A cloud-side DIN model (the slow component) and a device-side dual-GRU
//! model (the fast component) exchange latent representations: devices
//! upload a GRU summary of exposed-but-unclicked items, and the cloud sends
//! back interest vectors used to seed the device GRUs.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exchange;
pub mod fast;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod lifecycle;
pub mod optim;
pub mod params;
pub mod results;
pub mod slow;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use slow::Mode;
pub use tensor::{Real, Tensor};

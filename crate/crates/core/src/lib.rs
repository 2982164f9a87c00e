//! Context-aware trajectory anomaly detection.
//!
//! Long GPS traces are reduced to stay points, cut into subtrajectories and
//! rendered as grid-token sequences ([`preprocess`]). A conditional VAE
//! ([`cvae`]) reconstructs those sequences conditioned on an agent embedding
//! and on POI context vectors ([`poi`]); the reconstruction likelihood is the
//! subtrajectory anomaly score, and an agent's score is the maximum over its
//! subtrajectories ([`scoring`]). [`simulate`] generates labeled synthetic
//! cities and [`pipeline`] wires everything end to end.

pub mod cvae;
pub mod error;
pub mod geo;
pub mod io;
pub mod pipeline;
pub mod poi;
pub mod preprocess;
pub mod scoring;
pub mod simulate;

pub use error::{Error, Result};

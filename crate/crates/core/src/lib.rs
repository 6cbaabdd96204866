//! Topology-group imbalance discovery and adversarial re-weighting for GNNs.
//!
//! The crate is organized bottom-up: [`graph`] holds the data types,
//! [`synth`] builds the synthetic benchmarks, [`wl`] produces pseudo
//! topology labels, [`autodiff`] is the tensor engine behind every
//! trainable piece in [`models`], and [`training`] runs the alternating
//! min-max optimization. [`eval`] scores predictions and [`theory`] hosts
//! the region-model simulations. [`experiment`] ties
//! data, split and training settings together and [`checkpoint`] stores
//! trained parameters.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod models;
pub mod synth;
pub mod theory;
pub mod training;
pub mod wl;

pub use error::{Error, Result};

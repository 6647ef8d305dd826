//! Weighted sum-rate power control and beamforming in heterogeneous D2D
//! interference networks.
//!
//! Two solvers share one problem model:
//!
//! * [`fp`] is a closed-form fractional-programming (WMMSE-equivalent)
//!   block-ascent baseline.
//! * [`model`] is a heterogeneous interference graph neural network that maps
//!   a [`graph::HeteroGraph`] to beamformers, trained without labels by
//!   [`train`] on the negative weighted sum rate.
//!
//! [`channel`] generates network realizations and persists datasets,
//! [`metrics`] evaluates SINR and weighted sum rate, [`autodiff`] is the
//! small reverse-mode engine used for training, and [`experiments`] holds the
//! sample-efficiency, scaling and timing studies.

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod channel;
pub mod checks;
pub mod error;
pub mod experiments;
pub mod fp;
pub mod graph;
mod inference;
pub mod metrics;
pub mod model;
pub mod train;

pub use channel::{Dataset, Sample, ScenarioConfig};
pub use error::{Error, Result};
pub use graph::{
    BeamformerSet, ChannelSet, GraphConfig, HeteroGraph, LinkTypeSpec, NetworkInstance,
    PermutationSpec,
};
pub use model::{HignnArch, HignnParams};
pub use num_complex::Complex64;

//! Channel-out networks from scratch.
//!
//! A channel-out group passes only the candidates picked by a selection
//! function and zeroes the rest, so each sample activates one pathway through
//! the network. This crate provides the layers and their backward passes, a
//! sparse execution path that skips closed channels, pathway recording and
//! analysis, desk-scale training utilities, and a constructive lattice
//! approximator that realizes a target function as a single max-selected
//! channel-out group.

// Negated comparisons are the NaN-rejecting guards; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod approximator;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod pathway;
pub mod rng;
pub mod selection;
pub mod sparse_exec;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layers::{Exec, Layer, Mode, Network, Trace};
pub use rng::Rng;
pub use selection::{ChannelSelector, IndexSet};
pub use tensor::Tensor;

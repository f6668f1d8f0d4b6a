//! Algorithmic core of the refocus workbench.
//!
//! Everything here is pure computation over in-memory buffers: the
//! multi-label CNN and its hand-written backward pass, Grad-CAM, the joint
//! prediction + attention loss, the review-ranking scores, evaluation metrics
//! and polygon mask rasterization. The crate builds without `std` (it only
//! needs `alloc`); the default `std` feature adds rayon parallelism across
//! minibatch items.
//!
//! File formats, image decoding, the HTTP service and the experiment CLI live
//! in the companion `refocus` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod annotation;
pub mod dataset;
mod error;
pub mod explain;
pub mod loss;
mod math;
pub mod metrics;
pub mod nn;
pub mod ranking;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Grid, Tensor};

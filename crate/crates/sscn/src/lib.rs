//! Sparse spatial convolutional network engine.
//!
//! Feature data lives on a small set of "active" sites of a d-dimensional
//! grid (2 <= d <= 4). A layer's state is a coordinate hash table plus a
//! dense `a x m` feature matrix; convolutions are compiled into per-offset
//! rule books and executed as gather/multiply-add/scatter passes, so cost
//! scales with the number of active sites rather than the grid volume.
//!
//! The crate provides the sparse tensor core, rule-book construction for
//! SC/SSC/pooling/deconvolution layers, forward and backward execution,
//! trainable C3/FCN/U-Net segmentation networks, a point-cloud voxelization
//! pipeline, an SGD training loop with IoU evaluation, a FLOP/memory cost
//! model, and a naive dense oracle used for verification.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod matrix;
pub mod network;
pub mod ops;
pub mod oracle;
pub mod rng;
pub mod rulebook;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod verify;

mod error;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use tensor::{Coordinate, SparseTensor};

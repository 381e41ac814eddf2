//! Semi-supervised node classification with uncertainty-gated pseudo-label
//! smoothing.
//!
//! The crate implements the full training engine: dense matrices with a
//! reverse-mode tape ([`tape::Tape`]), an Adam optimizer, CSR graph operators
//! including the symmetric normalized adjacency, a variational graph encoder
//! producing per-node latent Gaussians, and the EM-alternating trainer that
//! mixes model predictions with the uniform distribution according to each
//! node's latent variance.
//!
//! Everything here is pure computation over `alloc` containers; the crate is
//! `no_std`-compatible so that IO, file formats, and the CLI can live in a
//! separate std companion crate. All float math goes through `libm`, which
//! keeps results identical across platforms and makes seeded runs fully
//! reproducible.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod rand_util;
pub mod tape;
pub mod trainer;

pub use adam::AdamState;
pub use encoder::{EncoderDims, EncoderParams, Features, LatentDistribution, LatentSample};
pub use error::{Error, Result};
pub use graph::{Graph, SparseAdjacency};
pub use matrix::DenseMatrix;
pub use tape::{NodeId, Parameter, Tape};
pub use trainer::{EmHistory, EmRecord, Method, PseudoLabelTable, TrainConfig};

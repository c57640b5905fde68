//! Masked, attention-weighted graph convolution over image-patch graphs,
//! trained with a three-term triplet objective and an age-regression head.
//!
//! Pipeline per image: split into patches, embed each patch with a small
//! conv stem, connect patches by K-nearest-neighbour in feature space, zero
//! a random subset of node rows, encode with attention-weighted graph
//! convolution, and contrast the structural embeddings against an MLP
//! anchor path and a row-shuffled negative.

pub mod autodiff;
pub mod contrastive;
pub mod dataset;
pub mod encoder;
pub mod experiments;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod patch_graph;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{Groups, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

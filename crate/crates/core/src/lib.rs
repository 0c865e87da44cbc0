//! Embedding-space toolkit for person re-identification.
//!
//! The crate covers everything that happens once an image has been turned
//! into a feature vector: persistence of embedding sets, global and
//! stripe-aligned local distances, the query/gallery evaluation protocol
//! (mAP and CMC), batch-hard triplet mining, mean-teacher weight averaging,
//! camera-offset diagnostics and exact t-SNE. A small colour-histogram
//! featurizer and PPM/PGM mask preprocessing make the pipeline runnable
//! end-to-end without a neural backbone.

pub mod camera;
pub mod cli;
pub mod container;
pub mod distance;
pub mod ensemble;
mod error;
pub mod featurize;
pub mod gallery;
pub mod imaging;
pub mod metrics;
pub mod mining;
pub mod tsne;

pub use error::{Error, Result};

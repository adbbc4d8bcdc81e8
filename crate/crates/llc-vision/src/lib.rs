//! Image classification with dense SIFT features, locality-constrained linear
//! coding (LLC) over a learned codebook, spatial-pyramid max pooling, one-vs-all
//! linear SVMs, and a two-stage MLP confidence cascade for open-set rejection.
//!
//! The crate is organised as a feature pipeline. Each stage is usable on its
//! own, and [`pipeline`] wires them together behind a trained [`pipeline::ModelBundle`]:
//!
//! ```text
//! image  ->  preprocess (CLAHE + median)          [image]
//!        ->  dense multi-scale SIFT               [descriptor]
//!        ->  LLC codes over a k-means codebook    [codebook, kdtree, encoding]
//!        ->  spatial-pyramid max pooling          [encoding]
//!        ->  one-vs-all linear SVM scores         [svm]
//!        ->  confidence MLP + open-set routing    [mlp, openset]
//! ```
//!
//! All learned stages take explicit RNG seeds and iterate containers in a
//! fixed order, so a given (data, config, seed) triple reproduces models and
//! reports bit for bit.

pub mod codebook;
pub mod descriptor;
pub mod encoding;
pub mod error;
pub mod image;
pub mod kdtree;
pub mod mlp;
pub mod openset;
pub mod pipeline;
pub mod svm;

pub use error::{Error, Result};

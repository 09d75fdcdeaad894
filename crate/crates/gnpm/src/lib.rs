//! Geometric neural parametric models over point clouds: cycle-consistent
//! learning of disentangled shape/pose latent spaces with dynamic-graph edge
//! convolutions, plus the supporting kernels, training and fitting loops,
//! metrics, and latent-space applications.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod graphnet;
pub mod knn;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;

//! Tri-modal self-supervised pretraining for point clouds, built around a CPU
//! Gaussian-splatting renderer.
//!
//! The crate is organized as a pipeline:
//!
//! - [`geometry`] — point-cloud kernels (normalization, FPS, kNN, Chamfer) and
//!   point-cloud file I/O.
//! - [`splat`] — 3D Gaussians, pinhole cameras, a software rasterizer that
//!   composites RGB/depth/alpha images, and image file writers.
//! - [`pipeline`] — synthetic shape generation and construction of
//!   (point cloud, novel-view image, depth map) training triplets.
//! - [`autodiff`] — a small reverse-mode autodiff engine over dense `f64`
//!   matrices, with a finite-difference gradient checker and checkpoint I/O.
//! - [`encoders`] — per-modality feature extractors and the masked point
//!   autoencoder, all built on [`autodiff`].
//! - [`losses`] — intra-modal and cross-modal contrastive losses plus the
//!   weighted total objective.
//! - [`train`] — AdamW, cosine annealing, and the pretraining loop.
//! - [`eval`] — frozen-encoder embedding, linear probe, and few-shot protocol.

pub mod autodiff;
pub mod config;
pub mod encoders;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod math3;
pub mod pipeline;
pub mod rng;
pub mod splat;
pub mod train;

//! Probabilistic tri-modal embedding engine for soundscape retrieval and mapping.
//!
//! The crate learns a joint probabilistic embedding space over satellite image
//! tiles, audio features, and captions. Each sample is represented as a
//! diagonal Gaussian `N(mu, diag(sigma^2))`; training uses a closed-form
//! probabilistic contrastive objective with pseudo-positive mining and a VIB
//! regularizer. The trained space drives cross-modal retrieval and the
//! generation of similarity / uncertainty rasters over geographic tile grids.
//!
//! Module map:
//!
//! - [`autodiff`] — dense 2-D tensors with reverse-mode gradients
//! - [`optim`] — Adam with decoupled weight decay, cosine warmup schedule
//! - [`params`] — named parameter store and on-disk checkpoints
//! - [`geodata`] — dataset records, leakage-free geographic splits, synthetic data
//! - [`encoders`] — zoom-crop simulation, GSD positional embedding, modality encoders
//! - [`fusion`] — transformer-based metadata fusion of the image branch
//! - [`loss`] — CSD distance, probabilistic matching loss, VIB, InfoNCE baseline
//! - [`train`] — batch assembly, optimization loop, checkpointing
//! - [`retrieval`] — ranking, Recall@10%, median rank, composed queries
//! - [`mapping`] — score/uncertainty rasters and PNG rendering

pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod geodata;
pub mod loss;
pub mod mapping;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use error::CoreError;

/// Default embedding dimensionality of the probabilistic space.
pub const EMBED_DIM: usize = 512;

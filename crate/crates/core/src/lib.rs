//! Text ↔ point-cloud retrieval built on multi-manifold bilinear similarity
//! maps, trained with a bidirectional contrastive objective.
//!
//! The crate is self-contained: [`numcore`] provides the differentiable tensor
//! engine; the model is assembled from [`afr`] (per-modality self-attention
//! refiners), [`rls`] (per-manifold token similarity maps), and [`simhead`]
//! (low-rank filter, convolutional pooling, global cosine branch).

pub mod afr;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradstages;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod retrieval;
pub mod rls;
pub mod simhead;
pub mod train;

pub use error::{Error, Result};

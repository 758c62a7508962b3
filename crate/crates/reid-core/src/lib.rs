//! Embedding-level person re-identification toolkit.
//!
//! Implements the mathematical machinery of three ReID training recipes over
//! plain feature vectors: supervised metric-learning losses, pseudo-label
//! refinement for self-training, and camera-aware contrastive learning with
//! momentum memories — plus ranking evaluation (CMC/mAP), k-reciprocal
//! re-ranking, a synthetic multi-camera data generator, and toy training
//! loops that exercise every gradient path at desk scale.
//!
//! The O(N²) kernels (pairwise distances, DBSCAN, silhouette, ranking,
//! Jaccard encoding) run data-parallel under the `parallel` feature (default
//! on) and fall back to sequential execution without it; both paths are
//! bit-identical.

pub mod cluster;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod memory;
pub mod parallel;
pub mod parts;
pub mod pipeline;
pub mod rerank;
pub mod silhouette;
pub mod softlabel;
pub mod synth;

pub use error::{Error, Result};

//! Probing toolkit for layerwise analysis of neural-network hidden states:
//! clustering probes (LDA + silhouette), representational similarity
//! analysis, homophone ABX discrimination, structural probes for dependency
//! trees, and sigmoid fitting of learning trajectories across checkpoints.

pub mod abx;
pub mod clusterprobe;
pub mod dataio;
pub mod error;
pub mod pipeline;
pub mod pooling;
pub mod rsa;
pub mod seeding;
pub mod structprobe;
pub mod synthgen;
pub mod trajectory;

pub use error::{Error, Result};

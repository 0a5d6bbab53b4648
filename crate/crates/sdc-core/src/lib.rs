//! Discovery pipeline for shared decodable concepts: contrastive decoding of
//! image embeddings from brain responses, a sparse interpretable concept
//! space, per-concept voxel masks, and cross-participant consistency scoring.
//!
//! Modules mirror the pipeline stages:
//!
//! * [`dataio`] — containers, trial tables, folds, reliability screening
//! * [`synthlab`] — synthetic data with planted ground truth
//! * [`decoder`] — contrastive MLP decoder, ridge baseline, retrieval metrics
//! * [`concept_spaces`] — embedding-to-concept projection heads
//! * [`mask_finder`] — sparse voxel masks and concept specificity
//! * [`consistency`] — region-fraction agreement across participants
//! * [`reporter`] — rankings, 2-D layouts, artifact emission

pub mod concept_spaces;
pub mod consistency;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod mask_finder;
pub mod reporter;
pub mod seeds;
pub mod stats;
pub mod synthlab;

pub use error::{Error, Result};

/// Crate version, for run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! Brain-to-embedding decoding: a contrastively trained MLP, a closed-form
//! ridge baseline, and retrieval-based evaluation.

pub mod adam;
pub mod eval;
pub mod infonce;
pub mod mlp;
pub mod ridge;

pub use adam::{Adam, AdamParams};
pub use eval::{chance_accuracy, topk_accuracy};
pub use infonce::{infonce_loss, infonce_with_grads};
pub use mlp::{lr_at_epoch, train_mlp, DecoderMlp, TrainConfig, TrainRecord, DEFAULT_LEAKY_SLOPE};
pub use ridge::{train_ridge, RidgeModel, RidgeSelection, DEFAULT_LAMBDA_GRID};

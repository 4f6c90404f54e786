//! Small probabilistic scorer with exact analytic gradients.
//!
//! A few strided conv blocks and a dense head ending in a single logit;
//! all parameters live in one flat `f64` buffer so the optimizer,
//! checkpointing, and finite-difference checks stay trivial. Training
//! alternates batches of negatives (focal loss) with single positive
//! bags gated on the bag-minimum cross entropy.

mod adam;
mod checkpoint;
mod loss;
mod model;
mod train;

pub use adam::OptimizerState;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use loss::{bag_gate, bag_loss, ce_pos, ce_pos_grad, loss_negative, loss_negative_grad};
pub use model::{Geometry, LayerSpec, ScorerModel};
pub use train::{train, StepKind, StepRecord, TrainHistory, TrainSchedule, TrainSet};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input geometry mismatch: model expects {expected_h}x{expected_w}x{expected_c}, patch is {got_h}x{got_w}x{got_c}")]
    ShapeMismatch {
        expected_h: usize,
        expected_w: usize,
        expected_c: usize,
        got_h: usize,
        got_w: usize,
        got_c: usize,
    },
    #[error("a positive bag must hold at least one instance")]
    EmptyBag,
    #[error("not enough training data: {bags} bags, {negatives} negatives (need >= 1 bag and >= {need} negatives)")]
    InsufficientData { bags: usize, negatives: usize, need: usize },
}

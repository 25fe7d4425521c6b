//! End-to-end training through the unrolled inference recurrence.

pub mod backward;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod trainer;

pub use backward::{mfvi_backward, MfviGrads};
pub use checkpoint::Checkpoint;
pub use loss::{bce_grad, bce_loss, DEFAULT_ALPHA};
pub use model::{ModelConfig, ModelParams, NpcrfModel, UnaryKind, UnarySource};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{
    evaluate, train, EpochLog, TrainConfig, TrainOutcome, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_PATIENCE,
};

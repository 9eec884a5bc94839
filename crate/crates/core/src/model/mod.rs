//! RoBERTa-style transformer encoder with masked-LM and classification heads.
//!
//! Everything is generic over [`Scalar`] so training can run in `f32` while
//! gradient checks run in `f64`.

mod checkpoint;
mod config;
mod encoder;
mod optim;
mod params;
mod scalar;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Activation, ModelConfig, PositionEmbedding};
pub use encoder::{
    backward_classify, backward_mlm, encode_hidden, forward_classify, forward_mlm, ClassifyOutput,
    MlmOutput, Mode,
};
pub use optim::{adamw_step, lr_at, AdamState, OptimizerConfig};
pub use params::{
    init_model, ClassifierHead, EncoderLayer, LayerNorm, Linear, MlmHead, ModelParams, ParamKind,
    ParamMut, ParamRef,
};
pub use scalar::Scalar;
pub use train::{
    continue_mlm, finetune, masked_token_accuracy, predict_logits, predict_scores, train_mlm,
    EpochRecord, FinetuneConfig, MlmTrainConfig, TrainHistory,
};

//! Toy denoiser, noise schedule, training and DDIM sampling.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod sample;
pub mod schedule;
pub mod text;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{MergeMode, ModelConfig, PromptStyle, TrainConfig, TrainMode};
pub use data::{
    draw_batch, load_samples, object_texts, record_conditions, smooth, train_loop, SceneSample,
};
pub use model::{
    denoiser_forward, Conditions, ForwardOptions, ForwardOutput, ObjectCondition, TextNoise,
};
pub use params::{is_trainable, DenoiserParams, LayerParams};
pub use sample::{cfg_combine, ddim_sample, Branch, ModelPredictor, NoisePredictor, SamplerConfig};
pub use schedule::{add_noise, make_schedule, DiffusionSchedule};
pub use train::{
    condition_dropout, loss_and_grads, loss_with, train_step, training_loss, AdamW, DropFlags,
    DropoutProbs, OptimizerState, TrainBatch, TrainExample,
};

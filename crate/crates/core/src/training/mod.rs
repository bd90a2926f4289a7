//! Episodic training: configuration, objective, optimizer, trunk
//! pretraining and the run loop.

mod config;
mod objective;
mod optim;
mod pretrain;
mod run;

pub use config::{BackgroundSource, PrototypeSource, TrainConfig};
pub use objective::{
    head_backward, head_forward, total_loss, BackgroundInput, EpisodeBatchItem, EpisodeStep, FeatureCache, HeadCache,
    HeadGrads, LossBreakdown, LossParts, Objective, TrunkInput,
};
pub use optim::{poly_lr, Sgd};
pub use pretrain::{cell_labels, pretrain_trunk, PretrainReport};
pub use run::{
    prepare_model, read_loss_csv, train_from, train_run, write_loss_csv, TrainOutcome, CONFIG_COPY, INFERENCE_CHECKPOINT,
    LOSS_LOG, TRAINING_CHECKPOINT,
};

//! Colorization network, objective and training loop.

mod config;
mod discriminator;
mod features;
mod generator;
mod layers;
mod losses;
mod optim;
mod train;

pub use config::TrainingConfig;
pub use discriminator::Discriminator;
pub use features::{FeatureExtractor, FEATURE_EXTRACTOR_SEED, FEATURE_EXTRACTOR_SHA256};
pub use generator::{pool_and_tokenize, tokens_to_map, Encoder, Generator, GeneratorConfig, GeneratorOutput, Variant};
pub use layers::{lrelu, Conv2dLayer, ResidualBlock, LEAKY_SLOPE};
pub use losses::{gram_matrix, loss_adv, loss_perc_style, loss_rec, lsgan_d_loss, lsgan_g_loss};
pub use optim::{grad_norm, Adam, AdamConfig};
pub use train::{
    Batch, Dataset, GeneratorPass, LossTerm, LossVars, StepReport, TrainState, Trainer, LOG_CSV_HEADER,
};

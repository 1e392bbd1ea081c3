//! Toy masked-autoencoder: patch layout, ViT encoder/decoder, masked-pixel
//! loss, AdamW and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod patch;
pub mod train;

pub use model::{mim_loss, sincos_table, Encoded, MaeConfig, MaeModel, MaeOutput, DECODER_PREFIX, ENCODER_PREFIX};
pub use optim::{AdamW, LrSchedule};
pub use patch::{hflip, patchify, unpatchify, PatchGrid};
pub use train::{apply_gradients, batch_gradients, evaluate_mim, train_step, BatchStats, TrainItem};

//! Operational shell around the models: datasets, checkpoints, configs and
//! the training loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod ppm;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{parse_kv, TrainConfig};
pub use data::{augment_flip, flip_horizontal, gen_synthetic, load_dataset, save_dataset, Dataset, Item, Split};
pub use train::{evaluate, train_classifier, EvalResult, EpochMetrics, TrainOutputs, TrainReport};

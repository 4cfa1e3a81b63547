//! Datasets, training, evaluation and the property suites behind the `pgp`
//! command-line tool.

pub mod augment;
pub mod config;
pub mod data;
pub mod suites;
pub mod train;

pub use augment::{augment, Augment};
pub use config::ExperimentConfig;
pub use data::{gen_synthetic, load_dataset, Dataset, RawDataset, Splits, SyntheticSpec};
pub use train::{ensemble_eval, evaluate, train, train_run, transfer_matrix, Metrics, TrainedRun, TransferMatrix};

//! Training loop, evaluation of trained networks and the two ablation grids.

mod ablate;
mod config;
mod sampler;
mod sgd;
mod trainer;

pub use ablate::{ablate, ablate_on, csv_path, AblationCell, AblationMode, ABLATION_HEADER};
pub use config::TrainConfig;
pub use sampler::{epoch_crops, materialize, CropSpec};
pub use sgd::{clip_grad_norm, Sgd};
pub use trainer::{
    crop_extents, detect_dataset, evaluate, read_run_log, run_training, train, RunRecord, Split,
    TrainOutcome, RUN_LOG, SPLIT_FILE,
};

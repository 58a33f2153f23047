//! End-to-end orchestration: data preparation, the factored model, training,
//! baselines and the cue ablation.

pub mod baselines;
pub mod config;
pub mod model;
pub mod persist;
pub mod runs;
pub mod train;

pub use baselines::{density_floor_oracle, DirectRegressor, RuleBasedModel, VolumeSource};
pub use config::{CueMask, ModelConfig, RunConfig, TrainConfig};
pub use persist::SavedModel;
pub use model::{prepare_dataset, Estimate, MassModel, Predictor, PreparedSample, Trainable};
pub use runs::{run_ablation_grid, run_baseline_direct, run_baseline_rulebased, run_model};
pub use train::{fit_and_evaluate, predict_all, train, Fitted, PredictionRow, RunRecord};

//! Experiment configuration, training, checkpoints, inference and evaluation.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod infer;
pub mod model;
pub mod train;

pub use config::{resolve_output, DataConfig, DiffusionConfig, ExperimentConfig, LrSchedule, ModelConfig, OptimConfig, TimestepSampling, Variant};
pub use evaluate::{evaluate_cases, evaluate_dirs, plot_dvh, write_dvh_set};
pub use infer::{check_compatible, constant_prescription_baseline, dump_attention, inference_schedule, predict_volume};
pub use model::DoseModel;
pub use train::{cohort_split, load_cohort, prepare_windows, smoothed_endpoints, TrainWindow, Trainer};

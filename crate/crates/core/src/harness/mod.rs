//! Command implementations behind the CLI: prepare, train, evaluate,
//! sweep, ablate and gradient-check, all driven by a [`RunConfig`].

pub mod artifacts;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod pipeline;
pub mod train;

pub use artifacts::{load_bundle, save_bundle, Layout, RunLog};
pub use config::{DataFormat, RunConfig};
pub use eval::{cmd_ablation, cmd_eval, cmd_sweep_missing, evaluate, evaluate_baseline, sweep_missing, AblationRow, EvalOutcome, SweepRow};
pub use gradcheck::{cmd_gradcheck, run_gradcheck, GradcheckEntry, GradcheckReport};
pub use pipeline::{prepare, CacheStatus, Denoiser, Fill, Prepared};
pub use train::{cmd_prepare, cmd_train, cmd_train_denoiser, fit_denoiser, fit_forecaster, load_denoiser, train_forecaster, EpochRecord, PrepareOutcome, TrainOptions};

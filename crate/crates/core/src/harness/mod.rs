//! Experiment configuration, training and evaluation runs, sweeps and
//! plot data.

mod config;
mod metrics;
mod plotdata;
mod run;
mod sweep;

pub use config::{ExperimentConfig, Trainer, SETTABLE};
pub use metrics::{read_metrics, EpisodeStats, MetricsRecord, MetricsWriter, Phase, RunManifest};
pub use plotdata::{emit_plotdata, find_metrics, LongRow, PlotData, SummaryRow};
pub use run::{
    eval_env_seed, evaluate, mean_std, run_episode, run_eval, run_name, run_training, seed_dir, train_env_seed,
    train_seed, Behaviour, EpisodeOutput, EvalReport, Summary, TrainOutcome,
};
pub use sweep::{sweep, SweepRow, SweepTable, SWEEP_PARAMS};

//! Experiment orchestration: training, evaluation, probing and reporting.

pub mod plot;
pub mod run;
pub mod study;
pub mod train;

pub use plot::{emit_plots, PlotInputs};
pub use run::{run, RunConfig, RunKind};
pub use train::{lr_factor, track_eos, train, EosTrack, LrSchedule, TrainConfig, TrainingLog};

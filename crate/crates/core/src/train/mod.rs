//! Loss, the training schedule and evaluation.

mod eval;
mod loss;
mod trainer;

pub use eval::{evaluate, export_spectrogram, signal_metrics, spectrogram, ClipMetrics, MetricsTable};
pub use loss::{compute_loss, loss_graph, LossBreakdown, LossVars, ALPHA_SPEC, ALPHA_TIME};
pub use trainer::{frame_loss, ClipFrames, EpochRecord, PhaseReport, Trainer, TrainingLog};

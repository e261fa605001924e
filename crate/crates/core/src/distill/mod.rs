//! Δ-distillation: losses, annealing schedule, student construction and
//! the training loop.

pub mod eval;
pub mod losses;
pub mod schedule;
pub mod student;
pub mod trainer;

pub use eval::{evaluate, EvalReport};
pub use losses::{combined_loss, cross_entropy, frobenius_loss, kd_loss, DistillWeights};
pub use schedule::{epoch_decay, schedule_value, AnnealState, KMode, Track};
pub use student::{derive_student_config, init_student_from_teacher, round_up, Student, StudentConfig, StudentOutput};
pub use trainer::{run_delta_distillation, DistillOptions, DistillSummary, MetricsRecord};

//! Joint optimization of both views: schedule, objective assembly, momentum
//! SGD, validation-based model selection and checkpoints.

mod checkpoint;
mod config;
mod objective;
mod optim;
mod run;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{lr_at, step_decay_schedule, Mode, TrainConfig};
pub use objective::{batch_objective, BatchLabels, ObjectiveInputs, ObjectiveOutput};
pub use optim::Sgd;
pub use run::{selection_branch, train, EpochSummary, RunDir, StepRecord, TrainOutcome, Trainer};

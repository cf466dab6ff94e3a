//! Minimal dense-tensor numerical core: every layer the network needs, each
//! with an analytic backward, plus Adam, checkpoints, and a finite-difference
//! gradient checker.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod lstm;
pub mod ops;
pub mod tensor;

pub use adam::{adam_step, scheduled_lr, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{check_fragment, DiffFragment, GradCheckReport};
pub use lstm::{lstm_cell_backward, lstm_cell_forward, LstmCache, LstmGrads, LstmStep, LstmWeights};
pub use ops::{Axis, Conv2dSpec, Padding};
pub use tensor::{GradSet, ParamId, ParamSet, Parameter, Tensor};

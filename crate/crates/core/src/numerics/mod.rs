//! Tensor core, reverse-mode tape, optimiser, schedule and gradient checks.

mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod param;
mod real;
mod rng;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Bound, Graph, Var};
pub use optim::{adam_step, lr_at, AdamConfig, LogEntry, TrainLog, Trainer};
pub use param::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use rng::RngState;
pub(crate) use tensor::softmax_row_in_place;
pub use tensor::{cross_entropy, softmax, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("axis {axis} is invalid for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("empty loss support")]
    EmptyLossSupport,
    #[error("target id {target} outside vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})")]
    Schedule { warmup_steps: usize, total_steps: usize },
}

#[cfg(test)]
mod tests;

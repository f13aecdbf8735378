//! Dense tensors, a reverse-mode tape, AdamW and the one-cycle schedule.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{gelu, normal_cdf, Gradients, Graph, Var};
pub use optim::{adamw_step, onecycle_lr, AdamWConfig, LrSchedule, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

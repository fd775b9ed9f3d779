//! Minimal deterministic tensor engine: `f64` tensors, a reverse-mode tape,
//! AdamW, a warm-up/cosine schedule and a flat checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{NumError, Result};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, LrSchedule};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

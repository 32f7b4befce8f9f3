//! Dense numeric core: tensors, primitive forward/backward passes, AdamW,
//! the cosine schedule, gradient clipping and finite-difference checks.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use optim::{adam_step, clip_global_norm, cosine_lr, AdamConfig, AdamState, ScheduleSpec};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

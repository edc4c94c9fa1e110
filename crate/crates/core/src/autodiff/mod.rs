//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod checkpoint;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use gradcheck::{grad_check, grad_check_many, grad_check_params, relative_error};
pub use ops::LAYER_NORM_EPS;
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tape::{ConvGeometry, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

//! Tensor arithmetic, seeded random streams, a small MLP with hand-written
//! gradients, and the Adam optimizer.

mod adam;
mod mlp;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{mlp_backward, mlp_forward, Mlp, MlpGrads};
pub use rng::{gaussian, RngStream};
pub use tensor::Tensor;

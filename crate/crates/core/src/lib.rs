//! Few-shot diffusion adaptation by fitting per-sample guidance embeddings
//! against a frozen source model.

mod binio;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod sampler;
pub mod schedules;
pub mod sge;
pub mod workbench;

pub use error::{Error, Result};

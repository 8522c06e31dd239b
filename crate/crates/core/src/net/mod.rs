//! Minimal 3D network stack: layers with explicit backward passes, the
//! stage U-Net, the cascade, and its optimizer.

pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use model::{CascadeModel, CascadeOutput, CascadeTrace, Conv, NetConfig, StageConfig, StageModel, StageTrace};
pub use optim::{AdamConfig, OptimizerState};
pub use tensor::{Real, Tensor5};
pub use train::{accumulate_gradients, backward_and_step, record_sample, SampleTape};

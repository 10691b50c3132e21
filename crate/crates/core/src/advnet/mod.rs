//! Toy generator and discriminator networks, reverse-mode differentiation
//! and the adversarial training loop.

pub mod adam;
pub mod checkpoint;
pub mod net;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, clip_global_norm, OptimState};
pub use net::{discriminator_forward, generator_forward, Layer, Net, ParamStore, ToyNetSpec};
pub use schedule::lr_schedule;
pub use tape::{Gradients, NodeId, ParamId, Tape};
pub use tensor::Tensor;
pub use train::{adversarial_train_step, train_loop, Mode, TrainConfig, TrainOutcome};

//! Networks, layers, optimizer and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod nets;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use layers::{GradMode, Mode, Param};
pub use nets::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
pub use tensor::{Scalar, Tensor};

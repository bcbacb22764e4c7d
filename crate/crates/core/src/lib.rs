pub mod augment;
pub mod data;
pub mod experiment;
pub mod hpo;
pub mod nas;
pub mod scheduler;
pub mod tensor;

pub use experiment::RunConfig;
pub use scheduler::{RunMode, TrainState, Trainer};
pub use tensor::{Graph, Tensor, TensorError, Var};

pub mod autograd;
pub mod bench;
pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod nutrition;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autograd::{Tape, Var};
pub use tensor::{Element, Tensor, TensorError};

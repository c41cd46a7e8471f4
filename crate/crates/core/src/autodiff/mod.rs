//! Dense tensors, a reverse-mode tape, and dual numbers for the meta scalar.

mod dual;
mod forward;
mod tape;
mod tensor;

pub use dual::{Dual, Real};
pub use forward::directional_derivative;
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::{DualTensor, Tensor};

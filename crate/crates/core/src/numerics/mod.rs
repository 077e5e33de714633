//! Tensor arithmetic, reverse-mode differentiation, a finite-difference
//! oracle, seeded randomness and the shared binary tensor format.

pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod rng;
pub mod serialize;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error, relative_error};
pub use optim::{clip_grad_norm, cosine_lr, Adam};
pub use param::{BoundParams, ParamSet, Parameter};
pub use rng::{derive_seed, RandomSource};
pub use serialize::{read_tensor, tensor_to_bytes, write_tensor, Archive};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, softmax, Tensor};

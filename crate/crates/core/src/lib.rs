//! Parallel grid pooling (PGP), the dilated-convolution decomposition built on
//! it, and a small CPU tensor engine with reverse-mode autodiff.

pub mod dilated;
pub mod error;
pub mod gradcheck;
pub mod gridpool;
pub mod ir;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gridpool::{grid_pool, pgp, pgp_inverse, AggregateMode, BranchLayout, BranchStack, GridCoord};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Shape, Tensor};

//! Forward kernels and their adjoints, free of any tape bookkeeping.

pub mod conv;
pub mod nn;

pub use conv::{avgpool2d, conv2d, ConvSpec, Window};
pub use nn::{global_avg_pool, linear, relu, softmax, softmax_cross_entropy, BatchStats, BnMode, BN_EPS};

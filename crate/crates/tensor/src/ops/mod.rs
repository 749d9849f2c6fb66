mod elementwise;
mod matmul;
mod nn;
mod reduce;
mod shape;

pub use elementwise::{broadcast_shape, sigmoid_value};

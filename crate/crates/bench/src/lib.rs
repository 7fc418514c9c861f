//! Shared inputs for the criterion benches.

use mmnet_core::{Rng, Tensor};

/// Uniform `[0, 1)` tensor of the given shape.
pub fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), 0.0, 1.0, &mut Rng::new(seed)).expect("valid shape")
}

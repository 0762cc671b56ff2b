#![allow(dead_code)]

use rand::Rng;
use ttpose_core::Tensor;

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

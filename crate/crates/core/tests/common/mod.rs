//! Shared helpers for the integration suites.

#![allow(dead_code)]

use docvit::numkernel::{Rng, Tensor};
use docvit::vit::ViTConfig;

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.normal() * scale).collect(),
    )
    .unwrap()
}

pub fn uniform_tensor(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(lo, hi)).collect(),
    )
    .unwrap()
}

pub fn tiny_vit() -> ViTConfig {
    docvit::gradsuite::tiny_vit()
}

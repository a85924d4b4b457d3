//! Fixtures shared by the kernel benchmarks.

use vqab_core::Tensor;

/// Deterministic pseudo-random tensor without pulling an RNG into the bench crate.
pub fn fixture(shape: &[usize], salt: u64) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let x = (i as u64 ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

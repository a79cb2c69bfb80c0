//! Benchmarks live in `benches/`; run them with `cargo bench -p odesr-bench`.
//!
//! The helpers here build the shared inputs.

use odesr::harness::random_ode_function;
use odesr::model::OdeFunction;
use odesr::{Shape, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic pseudo-random image-like tensor.
pub fn input(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    })
}

/// Two-conv time-dependent field over `state` channels.
pub fn field(state: usize, seed: u64) -> OdeFunction<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_ode_function(state, true, 0.5, &mut rng).expect("valid field")
}

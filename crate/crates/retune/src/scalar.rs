//! Scalar abstraction for the differentiable core.
//!
//! All numeric kernels are generic over [`Scalar`] so the same code paths
//! run at f32 (the product precision, matching the checkpoint payload) and
//! at f64 (used by the finite-difference verification suite).

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating scalar usable in tensors and graph ops: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from f64, for literals and config values.
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Standard normal draw from a seeded stream.
    fn sample_normal(rng: &mut ChaCha8Rng) -> Self;

    /// Uniform draw in [0, 1).
    fn sample_uniform(rng: &mut ChaCha8Rng) -> Self;
}

impl Scalar for f32 {
    fn sample_normal(rng: &mut ChaCha8Rng) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform(rng: &mut ChaCha8Rng) -> Self {
        rng.gen::<f32>()
    }
}

impl Scalar for f64 {
    fn sample_normal(rng: &mut ChaCha8Rng) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform(rng: &mut ChaCha8Rng) -> Self {
        rng.gen::<f64>()
    }
}

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Above this mean the sampler switches to the rounded normal approximation.
pub const KNUTH_MAX_LAMBDA: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    pub lambda: f64,
}

impl PoissonParams {
    pub fn new(lambda: f64) -> Self {
        assert!(lambda.is_finite() && lambda >= 0.0, "poisson lambda must be >= 0, got {lambda}");
        PoissonParams { lambda }
    }
}

/// Draws from Poisson(lambda).
///
/// Knuth's product-of-uniforms method up to `KNUTH_MAX_LAMBDA`, then
/// `round(lambda + sqrt(lambda) * z)` clamped at zero.
pub fn poisson_sample<R: Rng + ?Sized>(params: PoissonParams, rng: &mut R) -> u64 {
    let lambda = params.lambda;
    if lambda <= 0.0 {
        return 0;
    }
    if lambda <= KNUTH_MAX_LAMBDA {
        let limit = (-lambda).exp();
        let mut k = 0u64;
        let mut product: f64 = rng.random();
        while product > limit {
            k += 1;
            product *= rng.random::<f64>();
        }
        k
    } else {
        let z: f64 = StandardNormal.sample(rng);
        (lambda + lambda.sqrt() * z).round().max(0.0) as u64
    }
}

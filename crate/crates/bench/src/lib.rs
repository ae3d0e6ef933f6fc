//! Seeded fixtures shared by the benchmarks.

use ddm_core::trainer::random_orthonormal;
use ddm_core::{BetaParams, Decoder, Encoder, Layer, ModelBundle, Preprocessor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A K-dimensional model with `depth` encoder and decoder layers built from
/// scaled random orthonormal weights, on an identity-like preprocessor.
pub fn random_model(k: usize, depth: usize, seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = |rng: &mut ChaCha8Rng| {
        let bias = DVector::from_fn(k, |_, _| rng.gen_range(-0.2..0.2));
        Layer::new(random_orthonormal(k, k, rng) * 2.0, bias).unwrap()
    };
    let encoder = Encoder::new((0..depth).map(|_| layer(&mut rng)).collect(), 0.0).unwrap();
    let decoder = Decoder::new((0..depth).map(|_| layer(&mut rng)).collect()).unwrap();
    ModelBundle::new(
        encoder,
        decoder,
        BetaParams::new(0.5, 1.0).unwrap(),
        Preprocessor::identity(k, 0.05),
    )
    .unwrap()
}

/// Points drawn from the model itself, so every one is in its support.
pub fn model_points(model: &ModelBundle, n: usize, seed: u64) -> DMatrix<f64> {
    model
        .sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
}

/// Uniform points in the open unit cube.
pub fn cube_points(k: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(k, n, |_, _| rng.gen_range(0.05..0.95))
}

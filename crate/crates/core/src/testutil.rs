//! Seeded fixtures shared by unit and integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvParams, Kernel, Shape3, Tensor3};

/// Uniform values in `[-scale, scale]`.
pub fn random_tensor(shape: Shape3, seed: u64, scale: f32) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_fn(shape, |_, _, _| rng.gen_range(-scale..=scale))
}

pub fn random_conv(out_ch: usize, in_ch: usize, kernel: Kernel, seed: u64) -> ConvParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ConvParams::zeros(out_ch, in_ch, kernel);
    p.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
    p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    p
}

/// Every convolution random (weights and biases), unlike `init_weights`,
/// which starts some paths at the identity.
pub fn random_weights(config: &crate::net::ModelConfig, seed: u64) -> crate::net::ModelWeights {
    let shapes = crate::net::param_shapes(config);
    let params = shapes
        .into_iter()
        .enumerate()
        .map(|(k, (o, i, kernel))| {
            let mut p = random_conv(o, i, kernel, seed.wrapping_mul(1000).wrapping_add(k as u64));
            let scale = 1.0 / ((i * kernel.size() * kernel.size()) as f32).sqrt();
            p.weight.iter_mut().for_each(|w| *w *= 2.0 * scale);
            p
        })
        .collect();
    crate::net::ModelWeights::from_params(config, params).expect("shapes come from the config")
}

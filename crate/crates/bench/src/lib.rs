//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikediff_core::unet::{UNet, UNetConfig, HEAD};
use spikediff_core::Tensor;

/// Desk model with randomized final conv so outputs are non-trivial.
pub fn desk_unet(seed: u64) -> UNet {
    let mut unet = UNet::build(UNetConfig::desk(), seed).expect("desk config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in unet.params.tensors.iter_mut() {
        if name.starts_with(HEAD) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    unet
}

/// Images `(n, 16, 16, 1)` uniform in `[-1, 1]`.
pub fn desk_images(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![n, 16, 16, 1], |_| rng.random_range(-1.0..1.0))
}

/// Binary spikes of the given shape at roughly `density`.
pub fn spikes(shape: Vec<usize>, density: f64, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if rng.random_bool(density) { 1.0 } else { 0.0 })
}

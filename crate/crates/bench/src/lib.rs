//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsan::Tensor;

/// Uniform [0, 1) tensor of the given shape.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product()).map(|_| rng.random()).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Scores with a coarse grid so that ties occur, and labels of the given
/// positive rate.
pub fn scored_pixels(n: usize, positive_rate: f64, seed: u64) -> (Vec<f32>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(positive_rate)).collect();
    let scores = labels
        .iter()
        .map(|&l| {
            let s: f32 = rng.random::<f32>() * 0.8 + if l { 0.2 } else { 0.0 };
            (s * 256.0).round() / 256.0
        })
        .collect();
    (scores, labels)
}

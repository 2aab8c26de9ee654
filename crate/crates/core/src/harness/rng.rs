use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::DenseTensor;

/// Independent random streams derived from one experiment seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub(crate) enum Stream {
    BaseWeight = 1,
    Delta = 2,
    EvalBatch = 3,
    TrainBatch = 4,
    Lora = 5,
    RandomCores = 6,
    Standalone = 7,
}

/// Deterministic generator for `(seed, stream, index)`. Distinct indices get
/// non-overlapping windows of the ChaCha keystream.
pub(crate) fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(u128::from(index) << 40);
    rng
}

/// Seeded `rows × cols` matrix with i.i.d. `N(0, std²)` entries, drawn from a
/// stream no experiment uses.
pub fn seeded_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> DenseTensor<f64> {
    gaussian_matrix(rows, cols, std, &mut stream_rng(seed, Stream::Standalone, 0))
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DenseTensor<f64> {
    gaussian_tensor(vec![rows, cols], std, rng)
}

pub(crate) fn gaussian_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> DenseTensor<f64> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    DenseTensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape has positive modes")
}

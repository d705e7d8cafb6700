//! Xavier (Glorot) uniform initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;

/// `rows × cols` weights drawn from `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`, `fan_in = cols`, `fan_out = rows`.
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = xavier_bound(rows, cols);
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Seeded variant of [`xavier_uniform`].
pub fn xavier_init(shape: [usize; 2], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_uniform(shape[0], shape[1], &mut rng)
}

/// `1 × len` bias row drawn from `U(-b, b)` with `b = 1 / sqrt(fan_in)`.
pub fn bias_uniform<R: Rng>(len: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(1, len, data).expect("sized")
}

pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

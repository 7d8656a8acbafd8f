use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Scalar, Shape, Tensor};

/// Standard deviation of He fan-in initialization.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

/// Zero-mean normal samples with variance `2 / fan_in`, where fan-in is
/// `C_in · k_h · k_w` (dims 1..4 of `shape`). Deterministic in `seed`.
pub fn he_init<T: Scalar>(shape: impl Into<Shape>, seed: u64) -> Tensor<T> {
    let shape = shape.into();
    he_normal(shape, shape.c() * shape.h() * shape.w(), seed)
}

/// He normal samples with an explicit fan-in, for layouts (such as
/// transposed convolutions) where it is not `C·k·k` of the stored shape.
pub fn he_normal<T: Scalar>(shape: impl Into<Shape>, fan_in: usize, seed: u64) -> Tensor<T> {
    let shape = shape.into();
    let std = he_std(fan_in);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized from shape")
}

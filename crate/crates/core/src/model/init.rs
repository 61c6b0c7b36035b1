use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// The name with its leading scope (`big.`, `small.`, `shared.`) removed.
/// Initial values depend only on this, so the same layer position gets the
/// same starting point whichever model it belongs to.
pub fn unscoped(name: &str) -> &str {
    name.split_once('.').map_or(name, |(_, rest)| rest)
}

/// Initial value for a parameter, chosen from its name:
/// layer-norm gains are one, biases zero, the embedding table uniform with
/// variance `1/d`, and other matrices Xavier-uniform.
pub fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "gamma" => return Tensor::full(shape, 1.0),
        "beta" | "b" => return Tensor::zeros(shape),
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(unscoped(name).as_bytes()));
    let bound = if leaf == "embed" {
        (3.0 / shape[1] as f64).sqrt()
    } else {
        let (fan_in, fan_out) = match shape {
            [i, o] => (*i, *o),
            [n] => (*n, *n),
            _ => (shape[0], shape[1..].iter().product()),
        };
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    };
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

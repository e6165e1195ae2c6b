//! Seeded random streams.
//!
//! Every batch member draws from its own ChaCha stream selected by the
//! member index, so a member's noise does not depend on the batch size or
//! on how members are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

pub fn lane(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    rng
}

pub fn normal_vec<S: Scalar, R: rand::Rng>(rng: &mut R, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            S::of(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lanes_are_independent_and_repeatable() {
        let a: Vec<f64> = normal_vec(&mut lane(5, 0), 8);
        let b: Vec<f64> = normal_vec(&mut lane(5, 1), 8);
        assert_ne!(a, b);
        assert_eq!(a, normal_vec::<f64, _>(&mut lane(5, 0), 8));
        let c: Vec<f32> = normal_vec(&mut lane(5, 0), 8);
        assert_eq!(c[3], a[3] as f32);
    }
}

//! Scalar abstraction for the core math.
//!
//! Everything numeric in this crate (distributions, logits, gradients,
//! metrics) is generic over a floating-point scalar so the same code runs
//! in `f32` or `f64`. The crate root exposes `f64` aliases, which is what
//! the CLI and the reference experiments use.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable for policy logits, probabilities and
/// gradient arithmetic.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for lossless-enough conversion from `f64` constants.
    fn from_f64_lossy(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 converts into any Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Draws an index from an explicit categorical distribution.
///
/// The probabilities are assumed nonnegative and summing to ~1; any
/// numerical slack at the tail falls on the last index.
pub(crate) fn sample_categorical<S: Scalar, R: rand::Rng + ?Sized>(
    probs: &[S],
    rng: &mut R,
) -> usize {
    debug_assert!(!probs.is_empty());
    let u = S::from_f64_lossy(rng.gen::<f64>());
    let mut cumulative = S::zero();
    for (idx, &p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return idx;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn categorical_respects_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probs = [0.0f64, 1.0, 0.0];
        for _ in 0..100 {
            assert_eq!(sample_categorical(&probs, &mut rng), 1);
        }
    }

    #[test]
    fn categorical_frequencies_track_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probs = [0.25f64, 0.5, 0.25];
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_categorical(&probs, &mut rng)] += 1;
        }
        for (count, p) in counts.iter().zip(probs.iter()) {
            let freq = *count as f64 / n as f64;
            // 3-sigma binomial bound
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() < 3.0 * sigma + 1e-9,
                "freq {freq} vs p {p}"
            );
        }
    }
}

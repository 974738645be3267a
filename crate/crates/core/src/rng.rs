//! Seeded, splittable randomness.
//!
//! Every random draw in the simulator comes from a [`SeededRng`] identified by
//! a `(seed, stream)` pair. The generator is ChaCha8 keyed by the seed (expanded
//! through `SeedableRng::seed_from_u64`) with the ChaCha stream id set to
//! `stream`, so substreams are independent and each one can be re-derived
//! without replaying any other.
//!
//! Conventions, fixed so that ports can reproduce draws exactly:
//!
//! * uniform `[0, 1)`: `(next_u64() >> 11) * 2^-53`
//! * Gaussian: Box–Muller on two consecutive uniforms
//!   `u1, u2`, with `r = sqrt(-2 ln(1 - u1))`, `theta = 2 pi u2`; the cosine
//!   branch is returned first and the sine branch is cached for the next call.
//! * Bernoulli(q): `uniform() < q`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Named substreams. The low 32 bits carry an optional index (e.g. a step
/// number) so that per-step evaluation draws are addressable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Dictionary,
    Init,
    Data,
    Masks,
    Negatives,
    Probe,
    Eval,
    Test,
}

impl Stream {
    pub const fn id(self) -> u64 {
        let base: u64 = match self {
            Stream::Dictionary => 1,
            Stream::Init => 2,
            Stream::Data => 3,
            Stream::Masks => 4,
            Stream::Negatives => 5,
            Stream::Probe => 6,
            Stream::Eval => 7,
            Stream::Test => 15,
        };
        base << 32
    }

    pub const fn at(self, index: u32) -> u64 {
        self.id() | index as u64
    }
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare_gaussian: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare_gaussian: None,
        }
    }

    pub fn for_stream(seed: u64, stream: Stream) -> Self {
        Self::new(seed, stream.id())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, q: f64) -> bool {
        self.uniform() < q
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform sign in `{-1, +1}`.
    pub fn sign(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform index in `0..n` by rejection sampling.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }
}

/// `n` i.i.d. draws from `N(0, sigma^2)`.
pub fn gaussian_vector(rng: &mut SeededRng, n: usize, sigma: f64) -> crate::Result<Vec<f64>> {
    if n == 0 {
        return Err(crate::Error::EmptyDimension("gaussian_vector"));
    }
    Ok((0..n).map(|_| sigma * rng.standard_normal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_gives_zero_vector() {
        let mut rng = SeededRng::new(1, 0);
        assert_eq!(gaussian_vector(&mut rng, 3, 0.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn empty_dimension_is_an_error() {
        let mut rng = SeededRng::new(1, 0);
        assert!(matches!(
            gaussian_vector(&mut rng, 0, 1.0),
            Err(crate::Error::EmptyDimension(_))
        ));
    }

    #[test]
    fn same_seed_and_stream_reproduce() {
        let a = gaussian_vector(&mut SeededRng::new(7, 3), 16, 1.0).unwrap();
        let b = gaussian_vector(&mut SeededRng::new(7, 3), 16, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let a = gaussian_vector(&mut SeededRng::new(7, Stream::Data.id()), 8, 1.0).unwrap();
        let b = gaussian_vector(&mut SeededRng::new(7, Stream::Masks.id()), 8, 1.0).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(2024, 0);
        let n = 100_000;
        let v = gaussian_vector(&mut rng, n, 1.0).unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = SeededRng::new(5, 9);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn index_covers_range() {
        let mut rng = SeededRng::new(5, 9);
        let mut seen = [false; 5];
        for _ in 0..1000 {
            seen[rng.index(5)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}

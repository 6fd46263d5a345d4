use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::NumericsError;

/// Seeded random stream: ChaCha8 keyed by `seed`, with `stream_id` selecting
/// the ChaCha stream counter.
///
/// Equal `(seed, stream_id)` pairs replay the same sequence on every platform
/// and independent of thread layout. Parallel workers must use distinct
/// stream ids.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream with the same seed and a different id.
    pub fn derive(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// One draw from `N(mean, std²)`. `std == 0` returns `mean` without touching the stream.
pub fn gaussian(rng: &mut RngStream, mean: f64, std: f64) -> Result<f64, NumericsError> {
    if !(std >= 0.0) {
        return Err(NumericsError::Argument(format!(
            "standard deviation must be non-negative, got {std}"
        )));
    }
    if std == 0.0 {
        return Ok(mean);
    }
    Ok(mean + std * rng.standard_normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_gaussian_returns_mean() {
        let mut rng = RngStream::new(3, 0);
        assert_eq!(gaussian(&mut rng, 5.0, 0.0).unwrap(), 5.0);
    }

    #[test]
    fn negative_std_is_an_argument_error() {
        let mut rng = RngStream::new(3, 0);
        assert!(matches!(gaussian(&mut rng, 0.0, -1.0), Err(NumericsError::Argument(_))));
        assert!(gaussian(&mut rng, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 0);
        let xa: Vec<f64> = (0..100).map(|_| gaussian(&mut a, 0.0, 1.0).unwrap()).collect();
        let xb: Vec<f64> = (0..100).map(|_| gaussian(&mut b, 0.0, 1.0).unwrap()).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn streams_differ() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn law_of_large_numbers() {
        let mut rng = RngStream::new(11, 5);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = gaussian(&mut rng, 0.0, 1.0).unwrap();
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}

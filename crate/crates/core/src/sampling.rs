//! Deterministic point sets used by the property checkers.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const PRIMES: [u32; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    r
}

/// `count` Halton points inside the closed ball of the given radius,
/// obtained by rejection from the enclosing cube. In one dimension the
/// sequence fills `[-radius, radius]` directly.
pub fn halton_ball(dim: usize, count: usize, radius: f64) -> Vec<Vec<f64>> {
    assert!(dim >= 1 && dim <= PRIMES.len(), "halton_ball supports dims 1..=8");
    let mut out = Vec::with_capacity(count);
    let mut i: u64 = 1;
    while out.len() < count {
        let p: Vec<f64> = (0..dim)
            .map(|k| 2.0 * radical_inverse(i, PRIMES[k]) - 1.0)
            .collect();
        i += 1;
        let r2: f64 = p.iter().map(|v| v * v).sum();
        if r2 <= 1.0 {
            out.push(p.into_iter().map(|v| v * radius).collect());
        }
    }
    out
}

/// Seeded uniform sampler over a ball, for pairwise checks.
pub struct BallSampler {
    rng: ChaCha8Rng,
    dim: usize,
    radius: f64,
}

impl BallSampler {
    pub fn new(seed: u64, dim: usize, radius: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dim,
            radius,
        }
    }

    fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn sample(&mut self) -> Vec<f64> {
        loop {
            let p: Vec<f64> = (0..self.dim).map(|_| 2.0 * self.unit() - 1.0).collect();
            let r2: f64 = p.iter().map(|v| v * v).sum();
            if r2 <= 1.0 {
                return p.into_iter().map(|v| v * self.radius).collect();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_points_stay_in_ball() {
        let pts = halton_ball(2, 500, 3.0);
        assert_eq!(pts.len(), 500);
        assert!(pts.iter().all(|p| p[0] * p[0] + p[1] * p[1] <= 9.0 + 1e-12));
    }

    #[test]
    fn halton_1d_covers_interval() {
        let pts = halton_ball(1, 1000, 5.0);
        let lo = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        assert!(lo < -4.9 && hi > 4.9);
    }
}

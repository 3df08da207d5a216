//! Counter-based Brownian increments.
//!
//! Increment `(path, step, k)` at the fine resolution is the standard normal
//! obtained by inverse-CDF from the 64-bit word at position `step * d + k`
//! of the ChaCha8 stream `path_index` keyed by the master seed, scaled by
//! `sqrt(fine_delta)`. Coarser levels sum consecutive fine increments in
//! ascending order, so any worker can regenerate any increment without
//! shared state.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub master_seed: u64,
    pub n_paths: usize,
    /// Number of independent Brownian drivers.
    pub d: usize,
    pub fine_delta: f64,
    /// Coarse step = `coarsen_factor * fine_delta`.
    pub coarsen_factor: usize,
    pub horizon: f64,
}

/// Resolution of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fine,
    Coarse,
    /// Sums of this many fine increments.
    Factor(usize),
}

/// Number of steps of size `delta` in `horizon`, if it is an integer within
/// a relative guard of 1e-9.
pub fn steps_in(horizon: f64, delta: f64) -> Option<usize> {
    let ratio = horizon / delta;
    let r = ratio.round();
    ((ratio - r).abs() <= 1e-9 * r.max(1.0) && r >= 0.0).then_some(r as usize)
}

/// `coarse / fine` as an integer, or [`Error::NonDivisibleDelta`].
pub fn ratio_of(coarse: f64, fine: f64) -> Result<usize> {
    match steps_in(coarse, fine) {
        Some(m) if m >= 1 => Ok(m),
        _ => Err(Error::NonDivisibleDelta { coarse, fine }),
    }
}

impl NoisePlan {
    pub fn new(
        master_seed: u64,
        n_paths: usize,
        d: usize,
        fine_delta: f64,
        coarsen_factor: usize,
        horizon: f64,
    ) -> Result<Self> {
        let plan = NoisePlan {
            master_seed,
            n_paths,
            d,
            fine_delta,
            coarsen_factor,
            horizon,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(invalid("n_paths must be >= 1"));
        }
        if self.d == 0 {
            return Err(invalid("noise dimension must be >= 1"));
        }
        if !(self.fine_delta > 0.0 && self.fine_delta.is_finite()) {
            return Err(invalid(format!("fine delta must be positive, got {}", self.fine_delta)));
        }
        if self.coarsen_factor == 0 {
            return Err(invalid("coarsen factor must be >= 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        let steps = self.fine_steps_checked()?;
        if steps % self.coarsen_factor != 0 {
            return Err(invalid(format!(
                "horizon {} is not a whole number of coarse steps {}",
                self.horizon,
                self.coarse_delta()
            )));
        }
        Ok(())
    }

    fn fine_steps_checked(&self) -> Result<usize> {
        steps_in(self.horizon, self.fine_delta).ok_or_else(|| {
            invalid(format!(
                "horizon {} is not a whole number of steps {}",
                self.horizon, self.fine_delta
            ))
        })
    }

    pub fn fine_steps(&self) -> usize {
        self.fine_steps_checked().expect("validated plan")
    }

    pub fn coarse_delta(&self) -> f64 {
        self.fine_delta * self.coarsen_factor as f64
    }

    pub fn factor(&self, level: Level) -> usize {
        match level {
            Level::Fine => 1,
            Level::Coarse => self.coarsen_factor,
            Level::Factor(m) => m,
        }
    }

    /// The `(step, k)` fine increment of one path, by random access.
    pub fn fine_increment(&self, path_index: usize, step: usize, k: usize) -> f64 {
        let mut rng = stream_rng(self.master_seed, path_index);
        rng.set_word_pos(2 * (step as u128 * self.d as u128 + k as u128));
        self.fine_delta.sqrt() * standard_normal(rng.next_u64())
    }

    /// Sequential stream for one path at the given level.
    pub fn increments_for(&self, path_index: usize, level: Level) -> Result<IncrementStream> {
        if path_index >= self.n_paths {
            return Err(invalid(format!(
                "path index {path_index} out of range for {} paths",
                self.n_paths
            )));
        }
        let factor = self.factor(level);
        if factor == 0 {
            return Err(invalid("level factor must be >= 1"));
        }
        let fine = self.fine_steps();
        if !fine.is_multiple_of(factor) {
            return Err(invalid(format!(
                "{fine} fine steps are not divisible into groups of {factor}"
            )));
        }
        Ok(IncrementStream {
            rng: stream_rng(self.master_seed, path_index),
            d: self.d,
            factor,
            sqrt_dt: self.fine_delta.sqrt(),
            remaining: fine / factor,
            consumed: 0,
            checksum: 0.0,
        })
    }
}

fn stream_rng(seed: u64, path_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index as u64);
    rng
}

/// Maps a 64-bit word to a standard normal through the inverse CDF of the
/// midpoint-rounded uniform `((u >> 11) + 0.5) / 2^53`. The upper half is
/// evaluated through its mirror so the map is exactly odd and finite.
#[inline]
pub fn standard_normal(word: u64) -> f64 {
    const HALF: u64 = 1 << 52;
    const SCALE: f64 = 1.0 / (1u64 << 52) as f64;
    let m = word >> 11;
    if m < HALF {
        -std::f64::consts::SQRT_2 * erfc_inv((m as f64 + 0.5) * SCALE)
    } else {
        let mirror = (2 * HALF - 1 - m) as f64;
        std::f64::consts::SQRT_2 * erfc_inv((mirror + 0.5) * SCALE)
    }
}

/// Sequential increments of one path. Each item is a vector of `d` values.
#[derive(Clone, Debug)]
pub struct IncrementStream {
    rng: ChaCha8Rng,
    d: usize,
    factor: usize,
    sqrt_dt: f64,
    remaining: usize,
    consumed: u64,
    checksum: f64,
}

impl IncrementStream {
    pub fn remaining(&self) -> usize {
        self.remaining
    }

    /// Running sum of `j * dB_j` over the fine increments consumed so far,
    /// `j` counting from 1 in consumption order. Streams of one path at
    /// different levels end with equal checksums.
    pub fn checksum(&self) -> f64 {
        self.checksum
    }

    /// Writes the next increment into `out` (length `d`); `false` at the end.
    pub fn next_into(&mut self, out: &mut [f64]) -> bool {
        debug_assert_eq!(out.len(), self.d);
        if self.remaining == 0 {
            return false;
        }
        self.remaining -= 1;
        if self.factor == 1 {
            for o in out.iter_mut() {
                *o = self.sqrt_dt * standard_normal(self.rng.next_u64());
                self.consumed += 1;
                self.checksum += self.consumed as f64 * *o;
            }
        } else {
            out.fill(0.0);
            for _ in 0..self.factor {
                for o in out.iter_mut() {
                    let v = self.sqrt_dt * standard_normal(self.rng.next_u64());
                    self.consumed += 1;
                    self.checksum += self.consumed as f64 * v;
                    *o += v;
                }
            }
        }
        true
    }
}

impl Iterator for IncrementStream {
    type Item = Vec<f64>;
    fn next(&mut self) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.d];
        self.next_into(&mut out).then_some(out)
    }
}

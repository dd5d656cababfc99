//! Stable scalar kernels and counter-based random streams.
//!
//! Every random draw in the crate comes from a [`RandomStream`] addressed by a
//! seed and a path of split indices, so results do not depend on thread
//! scheduling or on the order in which datapoints are visited.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Logistic sigmoid, evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x <= 0.0 {
        x.exp().ln_1p()
    } else {
        x + (-x).exp().ln_1p()
    }
}

/// Log-probability of a Bernoulli outcome given its logit: `y*a - log(1+e^a)`.
#[inline]
pub fn bernoulli_log_prob(bit: f64, logit: f64) -> f64 {
    bit * logit - softplus(logit)
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("expected a finite value, got {x}")))
    }
}

/// Checked [`sigmoid`]: rejects non-finite input.
pub fn stable_sigmoid(x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(sigmoid(x))
}

/// Checked [`softplus`]: rejects non-finite input.
pub fn log1p_exp(x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(softplus(x))
}

/// `log Σ e^{v_i}`. Entries may be `-inf`; if all are, the result is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Domain("log_sum_exp of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max.is_nan() || max == f64::INFINITY {
        return Err(Error::Domain(format!("log_sum_exp: non-finite maximum {max}")));
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Self-normalizes log-domain importance weights.
pub fn normalize_log_weights(logw: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logw)?;
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    Ok(logw.iter().map(|&l| (l - lse).exp()).collect())
}

/// Effective sample size `1 / Σ w²` of normalized weights.
pub fn effective_sample_size(normalized: &[f64]) -> f64 {
    1.0 / normalized.iter().map(|w| w * w).sum::<f64>()
}

/// Tags separating the random streams used by different phases of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Phase {
    Init = 1,
    Shuffle = 2,
    Theta = 3,
    Phi = 4,
    Noise = 5,
    Validation = 6,
    Evaluation = 7,
    Generate = 8,
    Impute = 9,
    Binarize = 10,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, path: &[u64]) -> [u8; 32] {
    let mut state = seed;
    let mut h = splitmix64(&mut state);
    for &p in path {
        // Fold each index through a fresh mixing round so that paths of
        // different lengths never alias.
        state ^= h ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        h = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// A deterministic random stream addressed by `(seed, path)`.
///
/// Child streams created with [`RandomStream::split`] are keyed by the
/// extended path, not by the parent's position, so a child's draws never
/// depend on how much the parent has been used.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    path: Vec<u64>,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::with_path(seed, Vec::new())
    }

    pub fn with_path(seed: u64, path: Vec<u64>) -> Self {
        let rng = ChaCha8Rng::from_seed(derive_key(seed, &path));
        Self { seed, path, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn split(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        Self::with_path(self.seed, path)
    }

    pub fn split_phase(&self, phase: Phase) -> Self {
        self.split(phase as u64)
    }

    /// Position of the underlying block counter, for checkpointing.
    pub fn cursor(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_cursor(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    /// Uniform draw on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Unchecked Bernoulli draw returned as `0.0` / `1.0`.
    #[inline]
    pub fn bit(&mut self, p: f64) -> f64 {
        if self.uniform() < p {
            1.0
        } else {
            0.0
        }
    }

    pub fn draw_bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("bernoulli probability {p} outside [0, 1]")));
        }
        Ok(self.bit(p) == 1.0)
    }

    pub fn draw_gaussian(&mut self, mean: f64, stddev: f64) -> Result<f64> {
        if !(stddev >= 0.0) || !stddev.is_finite() || !mean.is_finite() {
            return Err(Error::Domain(format!("gaussian with mean {mean}, stddev {stddev}")));
        }
        Ok(mean + stddev * self.standard_normal())
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

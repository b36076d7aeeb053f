//! Categorical distributions over a finite vocabulary and the logit vectors
//! that parameterize them.
//!
//! All arithmetic is `f64` and every logarithm is natural. The convention
//! `0 * log 0 = 0` is applied by explicit branching wherever a sum of
//! `p log p` style terms appears.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on `sum(p) == 1` accepted by [`Distribution::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Largest `max(z) - min(z)` a [`LogitVector`] may span. Beyond this,
/// `exp(min - max)` underflows and softmax would produce exact zeros.
pub const MAX_LOGIT_SPREAD: f64 = 700.0;

/// Default smoothing floor applied to teacher targets during training.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Compensated (Neumaier) summation.
pub fn stable_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// A probability vector indexed by token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates non-negativity, normalization and `|V| >= 2`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::validation(
                "distribution",
                format!("vocabulary size must be at least 2, got {}", probs.len()),
            ));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::validation(
                "distribution",
                format!("entry {i} is {p}, expected a finite non-negative value"),
            ));
        }
        let total = stable_sum(probs.iter().copied());
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::validation(
                "distribution",
                format!("entries sum to {total}, expected 1"),
            ));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation(
                "weights",
                "all weights must be finite and non-negative",
            ));
        }
        let total = stable_sum(weights.iter().copied());
        if total <= 0.0 {
            return Err(Error::validation("weights", "weights sum to zero"));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::validation(
                "vocab_size",
                format!("must be at least 2, got {vocab_size}"),
            ));
        }
        Ok(Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        })
    }

    pub fn point_mass(vocab_size: usize, id: usize) -> Result<Self> {
        if id >= vocab_size {
            return Err(Error::validation(
                "id",
                format!("token {id} outside vocabulary of size {vocab_size}"),
            ));
        }
        let mut probs = vec![0.0; vocab_size];
        probs[id] = 1.0;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn get(&self, id: usize) -> f64 {
        self.probs[id]
    }

    /// Index of the largest entry; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }

    /// Natural-log transform. Zero entries map to `-inf`.
    pub fn ln(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    pub(crate) fn ensure_same_vocab(&self, other: &Distribution) -> Result<()> {
        if self.vocab_size() != other.vocab_size() {
            return Err(Error::VocabMismatch {
                left: self.vocab_size(),
                right: other.vocab_size(),
            });
        }
        Ok(())
    }

    /// Total variation distance `0.5 * sum |p - q|`.
    pub fn total_variation(&self, other: &Distribution) -> Result<f64> {
        self.ensure_same_vocab(other)?;
        Ok(0.5
            * stable_sum(
                self.probs
                    .iter()
                    .zip(&other.probs)
                    .map(|(a, b)| (a - b).abs()),
            ))
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

/// Index of the largest value, lowest id on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Pre-softmax scores over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector {
    logits: Vec<f64>,
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::validation(
                "logits",
                format!("vocabulary size must be at least 2, got {}", logits.len()),
            ));
        }
        if let Some((i, z)) = logits.iter().enumerate().find(|(_, z)| !z.is_finite()) {
            return Err(Error::validation(
                "logits",
                format!("entry {i} is {z}, expected a finite value"),
            ));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = logits.iter().copied().fold(f64::INFINITY, f64::min);
        if max - min > MAX_LOGIT_SPREAD {
            return Err(Error::validation(
                "logits",
                format!("spread {:.6e} exceeds {MAX_LOGIT_SPREAD}", max - min),
            ));
        }
        Ok(Self { logits })
    }

    pub fn zeros(vocab_size: usize) -> Result<Self> {
        Self::new(vec![0.0; vocab_size])
    }

    /// Logits whose softmax is `p`. Requires strictly positive entries.
    pub fn from_distribution(p: &Distribution) -> Result<Self> {
        if p.probs().iter().any(|v| *v <= 0.0) {
            return Err(Error::validation(
                "distribution",
                "log of a zero entry is not a finite logit",
            ));
        }
        Self::new(p.ln())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.len()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }

    /// Returns a copy with `delta` added to coordinate `i`.
    pub fn perturbed(&self, i: usize, delta: f64) -> Result<Self> {
        let mut logits = self.logits.clone();
        logits[i] += delta;
        Self::new(logits)
    }

    /// In-place `z -= step * grad`. Fails without mutating if the result
    /// would leave the valid logit domain.
    pub fn descend(&mut self, grad: &[f64], step: f64) -> Result<()> {
        if grad.len() != self.logits.len() {
            return Err(Error::VocabMismatch {
                left: self.logits.len(),
                right: grad.len(),
            });
        }
        let updated: Vec<f64> = self
            .logits
            .iter()
            .zip(grad)
            .map(|(z, g)| z - step * g)
            .collect();
        *self = Self::new(updated)?;
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(logits: Vec<f64>) -> Result<Self> {
        Self::new(logits)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(z: LogitVector) -> Self {
        z.logits
    }
}

/// Max-subtracted softmax. The result is strictly positive because
/// [`LogitVector`] bounds the logit spread.
pub fn softmax(z: &LogitVector) -> Distribution {
    let logits = z.as_slice();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total = stable_sum(exps.iter().copied());
    Distribution {
        probs: exps.into_iter().map(|e| e / total).collect(),
    }
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &Distribution) -> f64 {
    -stable_sum(
        p.probs()
            .iter()
            .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }),
    )
}

/// Clamps every entry to at least `eps` and renormalizes.
pub fn floor_and_renormalize(p: &Distribution, eps: f64) -> Result<Distribution> {
    let n = p.vocab_size() as f64;
    if !(eps >= 0.0 && eps < 1.0 / n) {
        return Err(Error::validation(
            "eps",
            format!("{eps} outside [0, 1/|V|) for |V| = {n}"),
        ));
    }
    if eps == 0.0 {
        return Ok(p.clone());
    }
    let floored: Vec<f64> = p.probs().iter().map(|v| v.max(eps)).collect();
    let total = stable_sum(floored.iter().copied());
    Ok(Distribution {
        probs: floored.into_iter().map(|v| v / total).collect(),
    })
}

/// Master seed for an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Independent stream derived from the master seed by a fixed label.
    /// Streams with different labels never share draws, so adding a new
    /// consumer does not perturb existing ones.
    pub fn stream(self, label: &str) -> RngStream {
        // FNV-1a over the label, then splitmix64 to mix with the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut x = self.0 ^ h;
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
        RngStream {
            rng: ChaCha8Rng::seed_from_u64(x),
        }
    }
}

/// The single mutable random source owned by one experiment component.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Inverse-CDF draw. Never returns an id with zero probability.
pub fn sample(p: &Distribution, rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &v) in p.probs().iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        last_positive = i;
        cumulative += v;
        if u < cumulative {
            return i;
        }
    }
    last_positive
}

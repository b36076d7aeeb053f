//! Teacher weights from self-reported confidence, and the confidence-weighted
//! multi-teacher token loss.

use serde::{Deserialize, Serialize};

use crate::divergence::{logit_gradient, DivergenceKind, GradientReport};
use crate::error::{Error, Result};
use crate::simplex::{stable_sum, Distribution, LogitVector};

pub const DEFAULT_CONFIDENCE_TEMPERATURE: f64 = 1.0;

/// Per-teacher confidence scores on the 0-100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScores {
    scores: Vec<f64>,
    temperature: f64,
}

impl ConfidenceScores {
    /// Strict constructor: every score must lie in `[0, 100]`.
    pub fn new(scores: Vec<f64>, temperature: f64) -> Result<Self> {
        Self::check_shape(&scores, temperature)?;
        if let Some((k, c)) = scores
            .iter()
            .enumerate()
            .find(|(_, c)| !(0.0..=100.0).contains(*c))
        {
            return Err(Error::validation(
                "confidence",
                format!("teacher {k} reported {c}, outside [0, 100]"),
            ));
        }
        Ok(Self {
            scores,
            temperature,
        })
    }

    /// Lenient constructor for adapter output: clamps finite scores into
    /// `[0, 100]` and maps non-finite ones to 0. Returns the indices that
    /// were changed.
    pub fn clamped(scores: Vec<f64>, temperature: f64) -> Result<(Self, Vec<usize>)> {
        let mut changed = Vec::new();
        let scores: Vec<f64> = scores
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                let fixed = if c.is_finite() {
                    c.clamp(0.0, 100.0)
                } else {
                    0.0
                };
                if fixed != c {
                    log::warn!("confidence for teacher {k} clamped from {c} to {fixed}");
                    changed.push(k);
                }
                fixed
            })
            .collect();
        Self::check_shape(&scores, temperature)?;
        Ok((
            Self {
                scores,
                temperature,
            },
            changed,
        ))
    }

    fn check_shape(scores: &[f64], temperature: f64) -> Result<()> {
        if scores.is_empty() {
            return Err(Error::validation("confidence", "need at least one teacher"));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::validation(
                "tau_conf",
                format!("{temperature} must be positive and finite"),
            ));
        }
        Ok(())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Positive weights over K teachers summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherWeights {
    weights: Vec<f64>,
}

impl TeacherWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::validation("weights", "need at least one teacher"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::validation(
                "weights",
                "every weight must be positive",
            ));
        }
        let total = stable_sum(weights.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::validation(
                "weights",
                format!("sum to {total}, expected 1"),
            ));
        }
        Ok(Self { weights })
    }

    /// `w_k = 1/K`, the equal-weight multi-teacher baseline.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::validation("weights", "need at least one teacher"));
        }
        Ok(Self {
            weights: vec![1.0 / k as f64; k],
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `w_k = softmax_k((c_k / 100) / tau_conf)`.
pub fn confidence_to_weights(c: &ConfidenceScores) -> TeacherWeights {
    let scaled: Vec<f64> = c
        .scores
        .iter()
        .map(|s| (s / 100.0) / c.temperature)
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total = stable_sum(exps.iter().copied());
    TeacherWeights {
        weights: exps.into_iter().map(|e| e / total).collect(),
    }
}

/// Weighted multi-teacher loss at one token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadTokenLoss {
    pub report: GradientReport,
    /// Unweighted per-teacher divergences.
    pub sub_losses: Vec<f64>,
    /// Teachers whose divergence was infinite.
    pub infinite_teachers: Vec<usize>,
}

/// `sum_k w_k D(p_k || softmax(z))` and its logit gradient. Teachers are
/// constants; only the student logits receive gradient.
pub fn mad_token_loss(
    kind: DivergenceKind,
    teachers: &[Distribution],
    weights: &TeacherWeights,
    student: &LogitVector,
) -> Result<MadTokenLoss> {
    if teachers.len() != weights.len() {
        return Err(Error::validation(
            "weights",
            format!("{} weights for {} teachers", weights.len(), teachers.len()),
        ));
    }
    let reports = teachers
        .iter()
        .map(|p| logit_gradient(kind, p, student))
        .collect::<Result<Vec<_>>>()?;

    let infinite_teachers: Vec<usize> = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.is_finite())
        .map(|(k, _)| k)
        .collect();
    let sub_losses: Vec<f64> = reports.iter().map(|r| r.value).collect();

    // Accumulate starting from the first weighted term so that K = 1 with
    // weight 1 reproduces the single-teacher result bit for bit.
    let w = weights.as_slice();
    let mut weighted = reports.iter().zip(w).map(|(r, wk)| {
        (
            wk * r.value,
            r.logit_grad.iter().map(|g| wk * g).collect::<Vec<f64>>(),
        )
    });
    let (mut value, mut grad) = weighted.next().expect("at least one teacher");
    for (v, g) in weighted {
        value += v;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    Ok(MadTokenLoss {
        report: GradientReport::new(value, grad),
        sub_losses,
        infinite_teachers,
    })
}

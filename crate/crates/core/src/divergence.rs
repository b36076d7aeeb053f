//! Forward KL, reverse KL and skew Jensen-Shannon divergences between a
//! fixed teacher distribution `p` and a student `q = softmax(z)`, with their
//! closed-form gradients with respect to the student logits.
//!
//! Conventions: forward KL is `KL(p || q)`; reverse KL is `KL(q || p)`;
//! `JSD_beta(p || q) = beta KL(p || m) + (1 - beta) KL(q || m)` with
//! `m = beta p + (1 - beta) q`. The teacher is a constant target, so no
//! score-function term appears anywhere.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{softmax, stable_sum, Distribution, LogitVector, RngStream};

/// `1/4 + 2/sqrt(e)`, the per-coordinate logit-gradient ceiling for JSD.
pub const JSD_GRAD_BOUND: f64 = 0.25 + 1.213_061_319_425_266_8;

/// The looser headline constant for the JSD logit-gradient bound.
pub const JSD_GRAD_BOUND_HEADLINE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceKind {
    ForwardKl,
    ReverseKl,
    Jsd { beta: f64 },
}

impl DivergenceKind {
    pub fn jsd(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::validation(
                "beta",
                format!("{beta} must lie strictly inside (0, 1)"),
            ));
        }
        Ok(DivergenceKind::Jsd { beta })
    }

    pub fn beta(&self) -> Option<f64> {
        match self {
            DivergenceKind::Jsd { beta } => Some(*beta),
            _ => None,
        }
    }

    /// Short name used in CSV rows.
    pub fn label(&self) -> &'static str {
        match self {
            DivergenceKind::ForwardKl => "fwd",
            DivergenceKind::ReverseKl => "rev",
            DivergenceKind::Jsd { .. } => "jsd",
        }
    }

    fn validate(&self) -> Result<()> {
        if let DivergenceKind::Jsd { beta } = self {
            DivergenceKind::jsd(*beta)?;
        }
        Ok(())
    }
}

impl Default for DivergenceKind {
    fn default() -> Self {
        DivergenceKind::Jsd { beta: 0.5 }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DivergenceKind::ForwardKl => write!(f, "fwd"),
            DivergenceKind::ReverseKl => write!(f, "rev"),
            DivergenceKind::Jsd { beta } => write!(f, "jsd:{beta}"),
        }
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fwd" => Ok(DivergenceKind::ForwardKl),
            "rev" => Ok(DivergenceKind::ReverseKl),
            "jsd" => Ok(DivergenceKind::default()),
            other => match other.strip_prefix("jsd:") {
                Some(beta) => {
                    let beta: f64 = beta.parse().map_err(|_| {
                        Error::validation("kind", format!("cannot parse beta in `{other}`"))
                    })?;
                    DivergenceKind::jsd(beta)
                }
                None => Err(Error::validation(
                    "kind",
                    format!("`{other}` is not one of fwd, rev, jsd:<beta>"),
                )),
            },
        }
    }
}

impl Serialize for DivergenceKind {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DivergenceKind {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Binary entropy `H(beta)`, the JSD loss ceiling.
pub fn binary_entropy(beta: f64) -> f64 {
    let term = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    term(beta) + term(1.0 - beta)
}

/// `KL(a || b)` with `0 log 0 = 0` and `+inf` when `a > 0 = b`.
pub fn kl(a: &Distribution, b: &Distribution) -> Result<f64> {
    a.ensure_same_vocab(b)?;
    Ok(kl_slices(a.probs(), b.probs()))
}

fn kl_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut terms = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x > 0.0 {
            if y <= 0.0 {
                return f64::INFINITY;
            }
            terms.push(x * (x / y).ln());
        }
    }
    // KL is non-negative; clip summation noise.
    stable_sum(terms).max(0.0)
}

fn mixture(p: &[f64], q: &[f64], beta: f64) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(a, b)| beta * a + (1.0 - beta) * b)
        .collect()
}

/// Divergence between teacher `p` and student `q`. Returns a genuine
/// `+inf` when the divergence is infinite.
pub fn divergence_value(kind: DivergenceKind, p: &Distribution, q: &Distribution) -> Result<f64> {
    kind.validate()?;
    p.ensure_same_vocab(q)?;
    Ok(value_slices(kind, p.probs(), q.probs()))
}

fn value_slices(kind: DivergenceKind, p: &[f64], q: &[f64]) -> f64 {
    match kind {
        DivergenceKind::ForwardKl => kl_slices(p, q),
        DivergenceKind::ReverseKl => kl_slices(q, p),
        DivergenceKind::Jsd { beta } => {
            let m = mixture(p, q, beta);
            beta * kl_slices(p, &m) + (1.0 - beta) * kl_slices(q, &m)
        }
    }
}

/// Loss value and logit gradient at a single position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub value: f64,
    pub logit_grad: Vec<f64>,
    pub inf_norm: f64,
}

impl GradientReport {
    pub(crate) fn new(value: f64, logit_grad: Vec<f64>) -> Self {
        let inf_norm = inf_norm(&logit_grad);
        Self {
            value,
            logit_grad,
            inf_norm,
        }
    }

    /// False when the value or any gradient entry is infinite.
    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.logit_grad.iter().all(|g| g.is_finite())
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Closed-form `d D(p || softmax(z)) / dz`.
///
/// Reverse KL with `p(v) = 0` somewhere yields infinite entries: coordinates
/// where the teacher is zero get `+inf`, all others `-inf`, and the report's
/// value and norm are `+inf`. Callers that need finite gradients floor `p`
/// first.
pub fn logit_gradient(
    kind: DivergenceKind,
    p: &Distribution,
    z: &LogitVector,
) -> Result<GradientReport> {
    kind.validate()?;
    if p.vocab_size() != z.vocab_size() {
        return Err(Error::VocabMismatch {
            left: p.vocab_size(),
            right: z.vocab_size(),
        });
    }
    let q = softmax(z);
    let (p, q) = (p.probs(), q.probs());
    let report = match kind {
        DivergenceKind::ForwardKl => {
            let grad = q.iter().zip(p).map(|(qi, pi)| qi - pi).collect();
            GradientReport::new(kl_slices(p, q), grad)
        }
        DivergenceKind::ReverseKl => reverse_kl_gradient(p, q),
        DivergenceKind::Jsd { beta } => jsd_gradient(beta, p, q),
    };
    Ok(report)
}

// grad_i = sum_v q(v) (delta_iv - q(i)) log(q(v)/p(v)) = q(i) (l_i - D),
// with l_v = log(q(v)/p(v)) and D = sum_v q(v) l_v the reverse KL.
fn reverse_kl_gradient(p: &[f64], q: &[f64]) -> GradientReport {
    if p.iter().any(|v| *v <= 0.0) {
        let grad = p
            .iter()
            .map(|v| {
                if *v <= 0.0 {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        return GradientReport::new(f64::INFINITY, grad);
    }
    let logs: Vec<f64> = q.iter().zip(p).map(|(qv, pv)| (qv / pv).ln()).collect();
    let value = stable_sum(q.iter().zip(&logs).map(|(qv, l)| qv * l));
    let grad = q
        .iter()
        .zip(&logs)
        .map(|(qi, li)| qi * (li - value))
        .collect();
    GradientReport::new(value.max(0.0), grad)
}

// Decomposition: grad = beta * A + (1 - beta) * (X - Y), where
//   A_i = -(1 - beta) sum_v p(v) q(v) (delta_iv - q(i)) / m(v)
//   X_i = sum_v q(v) (delta_iv - q(i)) log(q(v)/m(v))
//       = q(i) log(q(i)/m(i)) - q(i) KL(q || m)
//   Y_i = (1 - beta) sum_v q(v)^2 (delta_iv - q(i)) / m(v)
// m > 0 everywhere because q > 0.
fn jsd_gradient(beta: f64, p: &[f64], q: &[f64]) -> GradientReport {
    let m = mixture(p, q, beta);
    let kl_pm = kl_slices(p, &m);
    let kl_qm = kl_slices(q, &m);
    let value = beta * kl_pm + (1.0 - beta) * kl_qm;

    let r: Vec<f64> = p
        .iter()
        .zip(q)
        .zip(&m)
        .map(|((pv, qv), mv)| pv * qv / mv)
        .collect();
    let s: Vec<f64> = q.iter().zip(&m).map(|(qv, mv)| qv * qv / mv).collect();
    let r_sum = stable_sum(r.iter().copied());
    let s_sum = stable_sum(s.iter().copied());

    let grad = (0..q.len())
        .map(|i| {
            let a = -(1.0 - beta) * (r[i] - q[i] * r_sum);
            let x = q[i] * (q[i] / m[i]).ln() - q[i] * kl_qm;
            let y = (1.0 - beta) * (s[i] - q[i] * s_sum);
            beta * a + (1.0 - beta) * (x - y)
        })
        .collect();
    GradientReport::new(value, grad)
}

/// Central finite-difference estimate of the logit gradient,
/// `[f(z + h e_i) - f(z - h e_i)] / 2h`.
///
/// The two stencil losses are never formed separately: shifting `z_i` by
/// `±h` rescales the softmax exactly (`q_j -> q_j / D±` off `i`, with
/// `D± = 1 + q_i expm1(±h)`), so the loss difference is accumulated term by
/// term from `expm1`/`ln_1p` quantities of size `O(h)`. Subtracting two
/// `O(1)` losses would leave roundoff of order `eps_mach / h`, which swamps
/// gradients near `1e-5` at `h = 1e-6`.
///
/// Coordinates whose stencil produces a non-finite loss are `None`.
pub fn finite_difference_gradient(
    kind: DivergenceKind,
    p: &Distribution,
    z: &LogitVector,
    h: f64,
) -> Result<Vec<Option<f64>>> {
    kind.validate()?;
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::validation("h", format!("{h} outside [1e-8, 1e-4]")));
    }
    if p.vocab_size() != z.vocab_size() {
        return Err(Error::VocabMismatch {
            left: p.vocab_size(),
            right: z.vocab_size(),
        });
    }
    let q = softmax(z);
    Ok((0..q.vocab_size())
        .map(|i| stencil_difference(kind, p.probs(), q.probs(), i, h).map(|d| d / (2.0 * h)))
        .collect())
}

/// `f(z + h e_i) - f(z - h e_i)`, or `None` when either loss is infinite.
fn stencil_difference(kind: DivergenceKind, p: &[f64], q: &[f64], i: usize, h: f64) -> Option<f64> {
    let log_d_up = (q[i] * h.exp_m1()).ln_1p();
    let log_d_down = (q[i] * (-h).exp_m1()).ln_1p();
    let mut terms = Vec::with_capacity(q.len());
    for (j, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        let shift = if j == i { h } else { 0.0 };
        // ln a_up - ln a_down, where a_up/a_down are the shifted q_j.
        let dln = 2.0 * shift - (log_d_up - log_d_down);
        if qj == 0.0 {
            // Both shifted students put zero mass here too.
            match kind {
                DivergenceKind::ForwardKl if pj > 0.0 => return None,
                _ => continue,
            }
        }
        let ln_up = qj.ln() + shift - log_d_up;
        let a_down = qj * (-shift - log_d_down).exp();
        let da = a_down * dln.exp_m1();
        let term = match kind {
            DivergenceKind::ForwardKl => -pj * dln,
            DivergenceKind::ReverseKl => {
                if pj == 0.0 {
                    return None;
                }
                da * (ln_up - pj.ln()) + a_down * dln
            }
            DivergenceKind::Jsd { beta } => {
                let m_down = beta * pj + (1.0 - beta) * a_down;
                let dm = (1.0 - beta) * da;
                let dln_m = (dm / m_down).ln_1p();
                let ln_m_up = (m_down + dm).ln();
                -beta * pj * dln_m
                    + (1.0 - beta) * (da * (ln_up - ln_m_up) + a_down * (dln - dln_m))
            }
        };
        terms.push(term);
    }
    let d = stable_sum(terms);
    d.is_finite().then_some(d)
}

/// Largest relative disagreement between a closed-form gradient and a
/// finite-difference estimate, over coordinates where the closed form
/// exceeds `floor` in magnitude. Skipped stencil coordinates are ignored.
pub fn max_relative_error(closed: &[f64], numeric: &[Option<f64>], floor: f64) -> f64 {
    closed
        .iter()
        .zip(numeric)
        .filter_map(|(c, n)| n.map(|n| (c, n)))
        .filter(|(c, _)| c.abs() > floor)
        .map(|(c, n)| (c - n).abs() / c.abs())
        .fold(0.0, f64::max)
}

/// A `(p, q)` pair that produced an extreme value in a probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdBoundReport {
    pub kind: DivergenceKind,
    pub beta: f64,
    pub n_trials: usize,
    pub max_loss: f64,
    pub max_inf_norm: f64,
    /// `H(beta)`.
    pub loss_bound: f64,
    /// `1/4 + 2/sqrt(e)`.
    pub grad_bound: f64,
    pub grad_bound_headline: f64,
    /// Loss of the disjoint point-mass pair, which attains `H(beta)`.
    pub disjoint_loss: f64,
    pub loss_witness: Witness,
    pub grad_witness: Witness,
}

/// How a probe pair was generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PairFamily {
    Spiky,
    Flat,
    NearDisjoint,
}

fn dirichlet(rng: &mut RngStream, alpha: f64, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution as _, Gamma};
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng.rng())).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

/// Builds a strictly positive student distribution and the logits that
/// produce it. Entries below `1e-300` are raised to that floor.
fn student_from(mut q: Vec<f64>) -> (LogitVector, Distribution) {
    for v in q.iter_mut() {
        *v = v.max(1e-300);
    }
    let z = LogitVector::new(q.iter().map(|v| v.ln()).collect()).expect("bounded spread");
    let q = softmax(&z);
    (z, q)
}

fn probe_pair(
    family: PairFamily,
    n: usize,
    rng: &mut RngStream,
) -> (Distribution, LogitVector, Distribution) {
    let (p, q) = match family {
        PairFamily::Spiky => (dirichlet(rng, 0.1, n), dirichlet(rng, 0.1, n)),
        PairFamily::Flat => (dirichlet(rng, 10.0, n), dirichlet(rng, 10.0, n)),
        PairFamily::NearDisjoint => {
            // Split the vocabulary; p lives on one side, q on the other,
            // each leaking a fraction 10^-k to the opposite side.
            let cut = 1 + rng.below(n - 1);
            let leak_p = 10f64.powf(-(rng.uniform() * 300.0));
            let leak_q = 10f64.powf(-(rng.uniform() * 300.0));
            let mut p = vec![0.0; n];
            let mut q = vec![0.0; n];
            let inside_p = dirichlet(rng, 1.0, cut);
            let inside_q = dirichlet(rng, 1.0, n - cut);
            for (i, v) in inside_p.iter().enumerate() {
                p[i] = v * (1.0 - leak_p);
            }
            for (j, v) in inside_q.iter().enumerate() {
                q[cut + j] = v * (1.0 - leak_q);
            }
            // p may leak exactly zero; q must stay positive.
            if rng.uniform() < 0.5 {
                let spread = leak_p / (n - cut) as f64;
                for v in p.iter_mut().skip(cut) {
                    *v = spread;
                }
            } else {
                p[0] += leak_p;
            }
            let spread = leak_q / cut as f64;
            for v in q.iter_mut().take(cut) {
                *v = spread;
            }
            (p, q)
        }
    };
    let p = Distribution::from_weights(&p).expect("valid weights");
    let (z, q) = student_from(q);
    (p, z, q)
}

struct SweepMax {
    max_loss: f64,
    max_norm: f64,
    loss_witness: Witness,
    grad_witness: Witness,
}

/// Largest loss and logit-gradient norm of `kind` over the probe families.
fn sweep_pairs(
    kind: DivergenceKind,
    n_trials: usize,
    vocab_sizes: &[usize],
    rng: &mut RngStream,
) -> Result<SweepMax> {
    if n_trials == 0 {
        return Err(Error::validation("n_trials", "must be at least 1"));
    }
    if vocab_sizes.is_empty() || vocab_sizes.iter().any(|n| *n < 2) {
        return Err(Error::validation("vocab_sizes", "need sizes of at least 2"));
    }
    let families = [
        PairFamily::Spiky,
        PairFamily::Flat,
        PairFamily::NearDisjoint,
    ];
    let mut max_loss = f64::NEG_INFINITY;
    let mut max_norm = f64::NEG_INFINITY;
    let mut loss_witness = None;
    let mut grad_witness = None;
    for trial in 0..n_trials {
        let n = vocab_sizes[rng.below(vocab_sizes.len())];
        let (p, z, q) = probe_pair(families[trial % families.len()], n, rng);
        let report = logit_gradient(kind, &p, &z)?;
        if report.value > max_loss {
            max_loss = report.value;
            loss_witness = Some(Witness {
                p: p.probs().to_vec(),
                q: q.probs().to_vec(),
                value: report.value,
            });
        }
        if report.inf_norm > max_norm {
            max_norm = report.inf_norm;
            grad_witness = Some(Witness {
                p: p.probs().to_vec(),
                q: q.probs().to_vec(),
                value: report.inf_norm,
            });
        }
    }
    Ok(SweepMax {
        max_loss,
        max_norm,
        loss_witness: loss_witness.expect("at least one trial"),
        grad_witness: grad_witness.expect("at least one trial"),
    })
}

/// Sweeps random and adversarial pairs and records the largest JSD value and
/// logit-gradient norm.
pub fn jsd_bound_probe(
    beta: f64,
    n_trials: usize,
    vocab_sizes: &[usize],
    rng: &mut RngStream,
) -> Result<JsdBoundReport> {
    let kind = DivergenceKind::jsd(beta)?;
    let sweep = sweep_pairs(kind, n_trials, vocab_sizes, rng)?;
    let a = Distribution::point_mass(2, 0)?;
    let b = Distribution::point_mass(2, 1)?;
    let disjoint_loss = divergence_value(kind, &a, &b)?;
    Ok(JsdBoundReport {
        kind,
        beta,
        n_trials,
        max_loss: sweep.max_loss,
        max_inf_norm: sweep.max_norm,
        loss_bound: binary_entropy(beta),
        grad_bound: JSD_GRAD_BOUND,
        grad_bound_headline: JSD_GRAD_BOUND_HEADLINE,
        disjoint_loss,
        loss_witness: sweep.loss_witness,
        grad_witness: sweep.grad_witness,
    })
}

/// Largest forward-KL logit gradient `||q - p||_inf` over a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardBoundReport {
    pub n_trials: usize,
    pub max_inf_norm: f64,
    /// The gradient is a difference of two distributions, so at most 1.
    pub grad_bound: f64,
    pub max_loss: f64,
    pub grad_witness: Witness,
}

/// The [`jsd_bound_probe`] sweep for forward KL, whose loss is unbounded
/// but whose logit gradient is not.
pub fn forward_bound_probe(
    n_trials: usize,
    vocab_sizes: &[usize],
    rng: &mut RngStream,
) -> Result<ForwardBoundReport> {
    let sweep = sweep_pairs(DivergenceKind::ForwardKl, n_trials, vocab_sizes, rng)?;
    Ok(ForwardBoundReport {
        n_trials,
        max_inf_norm: sweep.max_norm,
        grad_bound: 1.0,
        max_loss: sweep.max_loss,
        grad_witness: sweep.grad_witness,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnboundednessPoint {
    pub delta: f64,
    pub inf_norm: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevKlUnboundednessReport {
    pub q: Vec<f64>,
    pub points: Vec<UnboundednessPoint>,
}

impl RevKlUnboundednessReport {
    /// True when the norm grows as delta shrinks (deltas in any order).
    pub fn is_monotone(&self) -> bool {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| b.delta.total_cmp(&a.delta));
        pts.windows(2).all(|w| w[1].inf_norm >= w[0].inf_norm)
    }
}

/// Reverse-KL logit gradient for the family `p = (delta, 1 - delta)`,
/// `q = (1/2, 1/2)`.
pub fn revkl_unboundedness_probe(deltas: &[f64]) -> Result<RevKlUnboundednessReport> {
    let z = LogitVector::zeros(2)?;
    let q = softmax(&z);
    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        if !(delta > 0.0 && delta <= 0.5) {
            return Err(Error::validation(
                "delta",
                format!("{delta} outside (0, 0.5]"),
            ));
        }
        let p = Distribution::new(vec![delta, 1.0 - delta])?;
        let report = logit_gradient(DivergenceKind::ReverseKl, &p, &z)?;
        points.push(UnboundednessPoint {
            delta,
            inf_norm: report.inf_norm,
            loss: report.value,
        });
    }
    Ok(RevKlUnboundednessReport {
        q: q.probs().to_vec(),
        points,
    })
}

/// Finite-difference step used by [`gradient_check_sweep`].
pub const GRADCHECK_STEP: f64 = 1e-6;

/// Coordinates whose closed-form gradient is at most this in magnitude are
/// not compared: there the central-difference roundoff dominates.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// One random finite case of a gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub case: usize,
    pub vocab: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub kind: DivergenceKind,
    pub n_cases: usize,
    /// Coordinates compared over all cases.
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_case: usize,
    /// Teacher and logits of the worst case.
    pub worst_p: Vec<f64>,
    pub worst_z: Vec<f64>,
    pub cases: Vec<GradCheckCase>,
}

/// Compares the closed-form logit gradient with central differences on
/// `n_cases` random finite pairs: `p ~ Dirichlet(1)` mixed with 10% uniform,
/// logits uniform in `[-3, 3]`, vocabulary sizes drawn from `vocab_sizes`.
pub fn gradient_check_sweep(
    kind: DivergenceKind,
    n_cases: usize,
    vocab_sizes: &[usize],
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    kind.validate()?;
    if n_cases == 0 {
        return Err(Error::validation("n_cases", "must be at least 1"));
    }
    if vocab_sizes.is_empty() || vocab_sizes.iter().any(|n| *n < 2) {
        return Err(Error::validation("vocab_sizes", "need sizes of at least 2"));
    }
    let mut cases = Vec::with_capacity(n_cases);
    let mut worst: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for case in 0..n_cases {
        let n = vocab_sizes[rng.below(vocab_sizes.len())];
        let raw = dirichlet(rng, 1.0, n);
        let mixed: Vec<f64> = raw.iter().map(|v| 0.9 * v + 0.1 / n as f64).collect();
        let p = Distribution::from_weights(&mixed)?;
        let z = LogitVector::new((0..n).map(|_| 6.0 * rng.uniform() - 3.0).collect())?;
        let closed = logit_gradient(kind, &p, &z)?;
        let numeric = finite_difference_gradient(kind, &p, &z, GRADCHECK_STEP)?;
        let checked = closed
            .logit_grad
            .iter()
            .zip(&numeric)
            .filter(|(c, fd)| c.abs() > GRADCHECK_FLOOR && fd.is_some())
            .count();
        let max_rel_err = max_relative_error(&closed.logit_grad, &numeric, GRADCHECK_FLOOR);
        if worst.as_ref().is_none_or(|(e, _, _)| max_rel_err > *e) {
            worst = Some((max_rel_err, p.probs().to_vec(), z.as_slice().to_vec()));
        }
        cases.push(GradCheckCase {
            case,
            vocab: n,
            checked,
            max_rel_err,
        });
    }
    let (max_rel_err, worst_p, worst_z) = worst.expect("at least one case");
    let worst_case = cases
        .iter()
        .position(|c| c.max_rel_err == max_rel_err)
        .expect("worst case recorded");
    Ok(GradCheckReport {
        kind,
        n_cases,
        checked: cases.iter().map(|c| c.checked).sum(),
        max_rel_err,
        worst_case,
        worst_p,
        worst_z,
        cases,
    })
}

/// Natural-log constant exposed for probes: `JSD_0.5` ceiling.
pub const LOG_2: f64 = LN_2;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::RngSeed;
    use proptest::prelude::*;

    const KINDS: [DivergenceKind; 3] = [
        DivergenceKind::ForwardKl,
        DivergenceKind::ReverseKl,
        DivergenceKind::Jsd { beta: 0.5 },
    ];

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn grad_bound_constant() {
        let expected = 0.25 + 2.0 / std::f64::consts::E.sqrt();
        assert!((JSD_GRAD_BOUND - expected).abs() < 1e-15);
        assert!((JSD_GRAD_BOUND - 1.463061).abs() < 1e-6);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(
            "fwd".parse::<DivergenceKind>().unwrap(),
            DivergenceKind::ForwardKl
        );
        assert_eq!(
            "rev".parse::<DivergenceKind>().unwrap(),
            DivergenceKind::ReverseKl
        );
        assert_eq!(
            "jsd:0.25".parse::<DivergenceKind>().unwrap(),
            DivergenceKind::Jsd { beta: 0.25 }
        );
        assert_eq!(
            "jsd".parse::<DivergenceKind>().unwrap(),
            DivergenceKind::default()
        );
        assert!("jsd:1.0".parse::<DivergenceKind>().is_err());
        assert!("jsd:0".parse::<DivergenceKind>().is_err());
        assert!("tv".parse::<DivergenceKind>().is_err());
        let k = DivergenceKind::Jsd { beta: 0.3 };
        assert_eq!(k.to_string().parse::<DivergenceKind>().unwrap(), k);
    }

    #[test]
    fn identical_pairs_have_zero_divergence() {
        let p = dist(&[0.2, 0.3, 0.5]);
        for kind in KINDS {
            assert_eq!(divergence_value(kind, &p, &p).unwrap(), 0.0, "{kind}");
        }
    }

    #[test]
    fn disjoint_point_masses_attain_log_two() {
        let a = Distribution::point_mass(2, 0).unwrap();
        let b = Distribution::point_mass(2, 1).unwrap();
        let v = divergence_value(DivergenceKind::Jsd { beta: 0.5 }, &a, &b).unwrap();
        assert!((v - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn infinite_kl_sentinels() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[1.0, 0.0]);
        assert_eq!(
            divergence_value(DivergenceKind::ForwardKl, &p, &q).unwrap(),
            f64::INFINITY
        );
        assert!(divergence_value(DivergenceKind::ReverseKl, &p, &q)
            .unwrap()
            .is_finite());
        assert_eq!(
            divergence_value(DivergenceKind::ReverseKl, &q, &p).unwrap(),
            f64::INFINITY
        );
        assert!(divergence_value(DivergenceKind::Jsd { beta: 0.5 }, &p, &q)
            .unwrap()
            .is_finite());
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.2, 0.3, 0.5]);
        assert!(matches!(
            divergence_value(DivergenceKind::ForwardKl, &p, &q),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn reverse_kl_mode_cost() {
        // p: 0.6 spread over {0,1}, 0.4 spread over {2,3}; q matches the first mode.
        let p = dist(&[0.3, 0.3, 0.2, 0.2]);
        let q = dist(&[0.5, 0.5, 0.0, 0.0]);
        let v = divergence_value(DivergenceKind::ReverseKl, &p, &q).unwrap();
        assert!((v - (-(0.6_f64).ln())).abs() < 1e-15);
        assert!((v - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn gradient_zero_at_minimum() {
        let z = LogitVector::new(vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let p = softmax(&z);
        for kind in KINDS {
            let r = logit_gradient(kind, &p, &z).unwrap();
            assert!(r.inf_norm < 1e-15, "{kind}: {:?}", r.logit_grad);
            assert!(r.value.abs() < 1e-15);
        }
    }

    #[test]
    fn forward_kl_half_half() {
        let p = dist(&[1.0, 0.0]);
        let z = LogitVector::zeros(2).unwrap();
        let r = logit_gradient(DivergenceKind::ForwardKl, &p, &z).unwrap();
        assert_eq!(r.logit_grad, vec![-0.5, 0.5]);
        let fd = finite_difference_gradient(DivergenceKind::ForwardKl, &p, &z, 1e-6).unwrap();
        assert!(max_relative_error(&r.logit_grad, &fd, 1e-6) < 1e-5);
    }

    #[test]
    fn reverse_kl_tiny_teacher_mass() {
        let p = dist(&[1e-12, 1.0 - 1e-12]);
        let z = LogitVector::zeros(2).unwrap();
        let r = logit_gradient(DivergenceKind::ReverseKl, &p, &z).unwrap();
        // Oracle: direct evaluation of sum_v q(v)(delta_iv - q(i)) log(q(v)/p(v)).
        let q: [f64; 2] = [0.5, 0.5];
        let pv: [f64; 2] = [1e-12, 1.0 - 1e-12];
        let oracle: Vec<f64> = (0..2)
            .map(|i| {
                (0..2)
                    .map(|v| {
                        let delta = if i == v { 1.0 } else { 0.0 };
                        q[v] * (delta - q[i]) * (q[v] / pv[v]).ln()
                    })
                    .sum::<f64>()
            })
            .collect();
        for (a, b) in r.logit_grad.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r.inf_norm - 6.9).abs() < 0.05, "{}", r.inf_norm);
        let fd = finite_difference_gradient(DivergenceKind::ReverseKl, &p, &z, 1e-6).unwrap();
        assert!(max_relative_error(&r.logit_grad, &fd, 1e-6) < 1e-5);
    }

    #[test]
    fn reverse_kl_exact_zero_is_flagged() {
        let p = dist(&[0.0, 1.0]);
        let z = LogitVector::zeros(2).unwrap();
        let r = logit_gradient(DivergenceKind::ReverseKl, &p, &z).unwrap();
        assert!(!r.is_finite());
        assert_eq!(r.logit_grad, vec![f64::INFINITY, f64::NEG_INFINITY]);
        assert_eq!(r.inf_norm, f64::INFINITY);
        let fd = finite_difference_gradient(DivergenceKind::ReverseKl, &p, &z, 1e-6).unwrap();
        assert!(fd.iter().all(Option::is_none));
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let p = dist(&[0.5, 0.5]);
        let z = LogitVector::zeros(2).unwrap();
        assert!(finite_difference_gradient(DivergenceKind::ForwardKl, &p, &z, 1e-3).is_err());
        assert!(finite_difference_gradient(DivergenceKind::ForwardKl, &p, &z, 1e-9).is_err());
    }

    #[test]
    fn forward_kl_fd_at_minimum_is_zero() {
        let z = LogitVector::new(vec![0.1, 0.7, -0.4]).unwrap();
        let p = softmax(&z);
        let fd = finite_difference_gradient(DivergenceKind::ForwardKl, &p, &z, 1e-6).unwrap();
        for g in fd {
            assert!(g.unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn unboundedness_probe_examples() {
        let r = revkl_unboundedness_probe(&[0.5, 1e-3, 1e-12, 1e-30]).unwrap();
        assert_eq!(r.points[0].inf_norm, 0.0);
        assert!((r.points[2].inf_norm - 6.9).abs() < 0.05);
        assert!(r.points[3].inf_norm > 16.0);
        assert!(r.is_monotone());
        assert!(revkl_unboundedness_probe(&[0.0]).is_err());
        assert!(revkl_unboundedness_probe(&[0.7]).is_err());
    }

    #[test]
    fn jsd_probe_small_sweep() {
        let mut rng = RngSeed(5).stream("probe");
        let r = jsd_bound_probe(0.5, 3000, &[2, 3, 8, 64], &mut rng).unwrap();
        assert!(r.max_loss <= LOG_2 + 1e-12);
        assert!(r.max_inf_norm <= JSD_GRAD_BOUND + 1e-9);
        assert!((r.disjoint_loss - LOG_2).abs() < 1e-9);
    }

    #[test]
    fn gradient_check_sweep_agrees() {
        for kind in KINDS {
            let mut rng = RngSeed(11).stream("gradcheck");
            let r = gradient_check_sweep(kind, 1000, &[2, 3, 5, 8, 16], &mut rng).unwrap();
            assert!(r.checked > 1000, "{kind}: only {} coordinates", r.checked);
            assert!(
                r.max_rel_err < 1e-5,
                "{kind}: {} at case {}",
                r.max_rel_err,
                r.worst_case
            );
        }
    }

    #[test]
    fn stencil_difference_matches_direct_subtraction() {
        let mut rng = RngSeed(3).stream("stencil");
        let h = 1e-4;
        for kind in KINDS {
            for _ in 0..50 {
                let p = Distribution::from_weights(&dirichlet(&mut rng, 1.0, 6)).unwrap();
                let z =
                    LogitVector::new((0..6).map(|_| 4.0 * rng.uniform() - 2.0).collect()).unwrap();
                let fd = finite_difference_gradient(kind, &p, &z, h).unwrap();
                for (i, got) in fd.iter().enumerate() {
                    let f = |d: f64| {
                        divergence_value(kind, &p, &softmax(&z.perturbed(i, d).unwrap())).unwrap()
                    };
                    let direct = (f(h) - f(-h)) / (2.0 * h);
                    let got = got.unwrap();
                    assert!(
                        (got - direct).abs() <= 1e-9 + 1e-6 * direct.abs(),
                        "{kind}: {got} vs {direct}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_check_sweep_rejects_empty() {
        let mut rng = RngSeed(0).stream("gradcheck");
        assert!(gradient_check_sweep(DivergenceKind::ForwardKl, 0, &[2], &mut rng).is_err());
        assert!(gradient_check_sweep(DivergenceKind::ForwardKl, 1, &[1], &mut rng).is_err());
    }

    #[test]
    fn forward_probe_gradient_at_most_one() {
        let mut rng = RngSeed(5).stream("probe");
        let r = forward_bound_probe(3000, &[2, 3, 8, 64], &mut rng).unwrap();
        assert!(r.max_inf_norm <= 1.0);
        // Near-disjoint pairs push it close to the ceiling.
        assert!(r.max_inf_norm > 0.9);
    }

    #[test]
    fn jsd_probe_skewed_beta() {
        let mut rng = RngSeed(6).stream("probe");
        let r = jsd_bound_probe(0.9, 3000, &[2, 5, 16], &mut rng).unwrap();
        let h = binary_entropy(0.9);
        assert!((h - 0.325083).abs() < 1e-6);
        assert!(r.max_loss <= h + 1e-12);
        assert!((r.disjoint_loss - h).abs() < 1e-12);
        assert!(r.max_inf_norm <= JSD_GRAD_BOUND + 1e-9);
    }

    fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..1.0, n),
                proptest::collection::vec(-6.0f64..6.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn nonnegative_and_bounded((w, z) in pair_strategy()) {
            prop_assume!(w.iter().sum::<f64>() > 1e-3);
            let p = Distribution::from_weights(&w).unwrap();
            let z = LogitVector::new(z).unwrap();
            let q = softmax(&z);
            for kind in KINDS {
                let v = divergence_value(kind, &p, &q).unwrap();
                prop_assert!(v >= 0.0);
            }
            let fwd = logit_gradient(DivergenceKind::ForwardKl, &p, &z).unwrap();
            prop_assert!(fwd.inf_norm <= 1.0);
            let jsd = logit_gradient(DivergenceKind::Jsd { beta: 0.5 }, &p, &z).unwrap();
            prop_assert!(jsd.inf_norm <= JSD_GRAD_BOUND + 1e-9);
            prop_assert!(jsd.value <= LOG_2 + 1e-12);
        }

        #[test]
        fn jsd_half_is_symmetric((w, z) in pair_strategy()) {
            prop_assume!(w.iter().sum::<f64>() > 1e-3);
            let p = Distribution::from_weights(&w).unwrap();
            let q = softmax(&LogitVector::new(z).unwrap());
            let k = DivergenceKind::Jsd { beta: 0.5 };
            let a = divergence_value(k, &p, &q).unwrap();
            let b = divergence_value(k, &q, &p).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn jsd_per_term_bounds((w, z) in pair_strategy(), beta in 0.01f64..0.99) {
            prop_assume!(w.iter().sum::<f64>() > 1e-3);
            let p = Distribution::from_weights(&w).unwrap();
            let q = softmax(&LogitVector::new(z).unwrap());
            let m = Distribution::new(mixture(p.probs(), q.probs(), beta)).unwrap();
            let kl_pm = kl(&p, &m).unwrap();
            let kl_qm = kl(&q, &m).unwrap();
            prop_assert!(kl_pm <= (1.0 / beta).ln() + 1e-12);
            prop_assert!(kl_qm <= (1.0 / (1.0 - beta)).ln() + 1e-12);
            let total = divergence_value(DivergenceKind::Jsd { beta }, &p, &q).unwrap();
            prop_assert!((total - (beta * kl_pm + (1.0 - beta) * kl_qm)).abs() <= 1e-14);
            prop_assert!(total <= binary_entropy(beta) + 1e-12);
        }
    }
}

//! Mode geometry of the three divergences.
//!
//! A teacher made of well-separated Gaussian bumps is binned onto a grid
//! and a student restricted to a single binned Gaussian (two parameters:
//! mean and log-width) is fitted to it by finite-difference gradient
//! descent. Reverse KL locks onto the heaviest bump at cost close to
//! `-log alpha`; forward KL stretches across all bumps. JSD concentrates
//! when the bumps are far apart (keeping slightly more tail on the other
//! bump than reverse KL) but its best single-Gaussian fit covers both
//! bumps once they are close. An unrestricted tabular student fitted with
//! forward KL is the control: it recovers the teacher exactly.
//!
//! Reverse KL and JSD have several local minima in this family, so
//! [`coverage_ordering`] compares the best fit over a fixed set of starts.

use serde::{Deserialize, Serialize};

use crate::divergence::{divergence_value, logit_gradient, DivergenceKind};
use crate::error::{Error, Result};
use crate::simplex::{
    floor_and_renormalize, softmax, stable_sum, Distribution, LogitVector, MAX_LOGIT_SPREAD,
};

pub const DEFAULT_BINS: usize = 256;
/// Grid half-width in units of sigma.
pub const DEFAULT_HALF_WIDTH: f64 = 10.0;
pub const DEFAULT_SEPARATION: f64 = 8.0;
pub const TEACHER_FLOOR: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-6;
pub const DEFAULT_FIT_STEPS: usize = 4000;
pub const DEFAULT_FIT_LR: f64 = 0.05;
/// How many times a step with a non-finite cost is retried at half the
/// learning rate before the fit aborts.
pub const MAX_LR_HALVINGS: usize = 5;
/// Largest change of either parameter in one step. A student much
/// narrower than the teacher sees forward-KL gradients in the hundreds; the
/// cap keeps the first steps from throwing it off the grid.
pub const MAX_PARAM_STEP: f64 = 0.25;
/// Initial student width relative to one teacher component.
pub const INIT_WIDTH_RATIO: f64 = 0.125;

/// Equal-width bins over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::validation(
                "grid",
                format!("[{lo}, {hi}] is not an interval"),
            ));
        }
        if bins < 2 {
            return Err(Error::validation("grid", "need at least 2 bins"));
        }
        Ok(Self { lo, hi, bins })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.width();
        (0..self.bins)
            .map(|i| self.lo + (i as f64 + 0.5) * w)
            .collect()
    }
}

/// `sum_j alpha_j N(mu_j, sigma^2)` binned onto a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedMixture {
    weights: Vec<f64>,
    centers: Vec<f64>,
    sigma: f64,
    grid: Grid,
    distribution: Distribution,
}

impl BinnedMixture {
    /// Requires positive weights summing to one, centers at least `6 sigma`
    /// apart, and a grid reaching 5 sigma beyond the outermost components.
    pub fn new(weights: Vec<f64>, centers: Vec<f64>, sigma: f64, grid: Grid) -> Result<Self> {
        if weights.is_empty() || weights.len() != centers.len() {
            return Err(Error::validation(
                "mixture",
                "one center per weight required",
            ));
        }
        if weights.iter().any(|a| a.is_nan() || *a <= 0.0)
            || (stable_sum(weights.iter().copied()) - 1.0).abs() > 1e-12
        {
            return Err(Error::validation(
                "alpha",
                format!("{weights:?} must be positive and sum to 1"),
            ));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::validation(
                "sigma",
                format!("{sigma} must be positive"),
            ));
        }
        let mut sorted = centers.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] < 6.0 * sigma) {
            return Err(Error::validation(
                "centers",
                "components must be at least 6 sigma apart",
            ));
        }
        if sorted[0] - 5.0 * sigma < grid.lo || sorted[sorted.len() - 1] + 5.0 * sigma > grid.hi {
            return Err(Error::validation(
                "grid",
                "does not cover 5 sigma around every component",
            ));
        }
        let xs = grid.centers();
        let density: Vec<f64> = xs
            .iter()
            .map(|x| {
                stable_sum(weights.iter().zip(&centers).map(|(a, mu)| {
                    let u = (x - mu) / sigma;
                    a * (-0.5 * u * u).exp()
                }))
            })
            .collect();
        let distribution =
            floor_and_renormalize(&Distribution::from_weights(&density)?, TEACHER_FLOOR)?;
        Ok(Self {
            weights,
            centers,
            sigma,
            grid,
            distribution,
        })
    }

    /// Two components with weights `(alpha, 1 - alpha)` placed
    /// symmetrically `separation` sigmas apart (heavier one on the left),
    /// on the default 256-bin grid over `[-10 sigma, 10 sigma]`.
    pub fn two_modes(alpha: f64, separation: f64) -> Result<Self> {
        let sigma = 1.0;
        let half = separation / 2.0 * sigma;
        let grid = Grid::new(
            -DEFAULT_HALF_WIDTH * sigma,
            DEFAULT_HALF_WIDTH * sigma,
            DEFAULT_BINS,
        )?;
        Self::new(vec![alpha, 1.0 - alpha], vec![-half, half], sigma, grid)
    }

    /// A single component at the origin.
    pub fn single_mode() -> Result<Self> {
        let grid = Grid::new(-DEFAULT_HALF_WIDTH, DEFAULT_HALF_WIDTH, DEFAULT_BINS)?;
        Self::new(vec![1.0], vec![0.0], 1.0, grid)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn distribution(&self) -> &Distribution {
        &self.distribution
    }

    /// `sum_j alpha_j mu_j`.
    pub fn mean(&self) -> f64 {
        stable_sum(self.weights.iter().zip(&self.centers).map(|(a, m)| a * m))
    }

    /// Standard deviation of the continuous mixture.
    pub fn std_dev(&self) -> f64 {
        let mean = self.mean();
        let second = stable_sum(
            self.weights
                .iter()
                .zip(&self.centers)
                .map(|(a, m)| a * (self.sigma * self.sigma + m * m)),
        );
        (second - mean * mean).max(0.0).sqrt()
    }

    /// Component index of every bin (nearest center; ties to the lower index).
    pub fn assignment(&self) -> Vec<usize> {
        self.grid
            .centers()
            .iter()
            .map(|x| {
                let mut best = 0;
                for j in 1..self.centers.len() {
                    if (x - self.centers[j]).abs() < (x - self.centers[best]).abs() {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Mass `q` puts on each component's bins.
    pub fn mode_masses(&self, q: &Distribution) -> Result<Vec<f64>> {
        if q.vocab_size() != self.grid.bins {
            return Err(Error::VocabMismatch {
                left: self.grid.bins,
                right: q.vocab_size(),
            });
        }
        let mut masses = vec![Vec::new(); self.centers.len()];
        for (v, j) in q.probs().iter().zip(self.assignment()) {
            masses[j].push(*v);
        }
        Ok(masses.into_iter().map(stable_sum).collect())
    }

    /// Index of the heaviest component (lowest index on ties).
    pub fn dominant(&self) -> usize {
        crate::simplex::argmax(&self.weights)
    }
}

/// A single binned Gaussian: the capacity-restricted student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestrictedStudent {
    pub mean: f64,
    pub log_width: f64,
}

impl RestrictedStudent {
    pub fn new(mean: f64, log_width: f64) -> Result<Self> {
        if !(mean.is_finite() && log_width.is_finite()) {
            return Err(Error::validation(
                "student",
                format!("({mean}, {log_width}) must be finite"),
            ));
        }
        Ok(Self { mean, log_width })
    }

    /// Student centered on the teacher's overall mean, narrower than one
    /// teacher component so that it starts out committed to no mode.
    pub fn neutral(teacher: &BinnedMixture) -> Self {
        Self {
            mean: teacher.mean(),
            log_width: (INIT_WIDTH_RATIO * teacher.sigma()).ln(),
        }
    }

    pub fn width(&self) -> f64 {
        self.log_width.exp()
    }

    /// Binned density. Logits are clipped to the representable spread so
    /// every bin keeps a tiny positive mass.
    pub fn distribution(&self, grid: &Grid) -> Result<Distribution> {
        let s = self.width();
        let logits: Vec<f64> = grid
            .centers()
            .iter()
            .map(|x| {
                let u = (x - self.mean) / s;
                -0.5 * u * u
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::validation("student", "non-finite density"));
        }
        let floor = max - MAX_LOGIT_SPREAD;
        let clipped: Vec<f64> = logits.into_iter().map(|z| z.max(floor)).collect();
        Ok(softmax(&LogitVector::new(clipped)?))
    }
}

/// One recorded descent step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub mean: f64,
    pub log_width: f64,
    pub cost: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: DivergenceKind,
    pub student: RestrictedStudent,
    pub terminal_cost: f64,
    pub mode_masses: Vec<f64>,
    pub trace: Vec<TracePoint>,
}

impl FitResult {
    pub fn costs(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.cost).collect()
    }
}

fn cost(kind: DivergenceKind, teacher: &BinnedMixture, student: &RestrictedStudent) -> Result<f64> {
    let q = student.distribution(&teacher.grid)?;
    divergence_value(kind, teacher.distribution(), &q)
}

/// Central finite-difference gradient in (mean, log_width).
fn fd_gradient(
    kind: DivergenceKind,
    teacher: &BinnedMixture,
    s: &RestrictedStudent,
) -> Result<[f64; 2]> {
    let at = |dm: f64, dl: f64| {
        cost(
            kind,
            teacher,
            &RestrictedStudent::new(s.mean + dm, s.log_width + dl)?,
        )
    };
    let gm = (at(FD_STEP, 0.0)? - at(-FD_STEP, 0.0)?) / (2.0 * FD_STEP);
    let gl = (at(0.0, FD_STEP)? - at(0.0, -FD_STEP)?) / (2.0 * FD_STEP);
    Ok([gm, gl])
}

/// Gradient descent on the restricted student, each parameter's step
/// clipped to [`MAX_PARAM_STEP`]. A step that lands on a
/// non-finite cost (or has a non-finite gradient) is retried with half the
/// learning rate, at most [`MAX_LR_HALVINGS`] times, after which the fit
/// aborts with the trace so far in the error message.
pub fn fit(
    kind: DivergenceKind,
    teacher: &BinnedMixture,
    init: RestrictedStudent,
    steps: usize,
    lr: f64,
) -> Result<FitResult> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::validation("lr", format!("{lr} must be positive")));
    }
    let mut student = init;
    let mut current = cost(kind, teacher, &student)?;
    if !current.is_finite() {
        return Err(Error::validation(
            "init",
            format!("{kind} cost is {current} at the initial student"),
        ));
    }
    let mut trace = vec![TracePoint {
        step: 0,
        mean: student.mean,
        log_width: student.log_width,
        cost: current,
        lr,
    }];
    for step in 1..=steps {
        let mut rate = lr;
        let mut accepted = None;
        for _ in 0..=MAX_LR_HALVINGS {
            let proposal = fd_gradient(kind, teacher, &student).and_then(|g| {
                let dm = (rate * g[0]).clamp(-MAX_PARAM_STEP, MAX_PARAM_STEP);
                let dl = (rate * g[1]).clamp(-MAX_PARAM_STEP, MAX_PARAM_STEP);
                let next = RestrictedStudent::new(student.mean - dm, student.log_width - dl)?;
                Ok((next, cost(kind, teacher, &next)?))
            });
            match proposal {
                Ok((next, c)) if c.is_finite() => {
                    accepted = Some((next, c));
                    break;
                }
                _ => rate /= 2.0,
            }
        }
        let Some((next, c)) = accepted else {
            let tail: Vec<String> = trace
                .iter()
                .rev()
                .take(5)
                .map(|t| {
                    format!(
                        "step {} mean {} log_width {} cost {}",
                        t.step, t.mean, t.log_width, t.cost
                    )
                })
                .collect();
            return Err(Error::NumericAbort {
                iteration: step,
                step,
                reason: format!(
                    "non-finite {kind} cost after {MAX_LR_HALVINGS} halvings; last: {}",
                    tail.join("; ")
                ),
            });
        };
        student = next;
        current = c;
        trace.push(TracePoint {
            step,
            mean: student.mean,
            log_width: student.log_width,
            cost: current,
            lr: rate,
        });
    }
    let q = student.distribution(&teacher.grid)?;
    Ok(FitResult {
        kind,
        student,
        terminal_cost: current,
        mode_masses: teacher.mode_masses(&q)?,
        trace,
    })
}

/// Result of the unrestricted forward-KL control arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularFit {
    pub student: Distribution,
    pub total_variation: f64,
    pub mode_masses: Vec<f64>,
    pub costs: Vec<f64>,
}

/// Fits free logits over every bin with the exact forward-KL gradient
/// `q - p`, starting from uniform. Its minimiser is the teacher itself.
pub fn fit_tabular_forward(teacher: &BinnedMixture, steps: usize, lr: f64) -> Result<TabularFit> {
    let p = teacher.distribution();
    let mut z = LogitVector::zeros(p.vocab_size())?;
    let mut costs = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let g = logit_gradient(DivergenceKind::ForwardKl, p, &z)?;
        costs.push(g.value);
        z.descend(&g.logit_grad, lr)?;
    }
    let q = softmax(&z);
    costs.push(divergence_value(DivergenceKind::ForwardKl, p, &q)?);
    Ok(TabularFit {
        total_variation: q.total_variation(p)?,
        mode_masses: teacher.mode_masses(&q)?,
        student: q,
        costs,
    })
}

/// Secondary-mode mass per divergence for one teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub separation: f64,
    pub reverse: FitResult,
    pub jsd: FitResult,
    pub forward: FitResult,
}

impl CoverageReport {
    /// Mass on the non-dominant component(s).
    fn secondary(fit: &FitResult, dominant: usize) -> f64 {
        stable_sum(
            fit.mode_masses
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != dominant)
                .map(|(_, m)| *m),
        )
    }

    /// `[reverse, jsd, forward]` secondary masses.
    pub fn secondary_masses(&self) -> [f64; 3] {
        let dominant = crate::simplex::argmax(&[self.alpha, 1.0 - self.alpha]);
        [
            Self::secondary(&self.reverse, dominant),
            Self::secondary(&self.jsd, dominant),
            Self::secondary(&self.forward, dominant),
        ]
    }

    /// `mu2(rev) < mu2(jsd) < mu2(fwd)` with `mu2(rev) < 0.05`.
    pub fn ordered(&self) -> bool {
        let [r, j, f] = self.secondary_masses();
        r < j && j < f && r < 0.05
    }
}

/// Fits from every start and keeps the lowest terminal cost (earliest
/// start on ties).
pub fn fit_best(
    kind: DivergenceKind,
    teacher: &BinnedMixture,
    starts: &[RestrictedStudent],
    steps: usize,
    lr: f64,
) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    for start in starts {
        let candidate = fit(kind, teacher, *start, steps, lr)?;
        if best
            .as_ref()
            .is_none_or(|b| candidate.terminal_cost < b.terminal_cost)
        {
            best = Some(candidate);
        }
    }
    best.ok_or_else(|| Error::validation("starts", "need at least one start"))
}

/// `init`, then one start on each component (one component wide), then a
/// moment-matched start covering the whole teacher.
pub fn default_starts(teacher: &BinnedMixture, init: RestrictedStudent) -> Vec<RestrictedStudent> {
    let mut starts = vec![init];
    starts.extend(teacher.centers().iter().map(|c| RestrictedStudent {
        mean: *c,
        log_width: teacher.sigma().ln(),
    }));
    starts.push(RestrictedStudent {
        mean: teacher.mean(),
        log_width: teacher.std_dev().ln(),
    });
    starts
}

/// Best fit of each kind over [`default_starts`], so that the comparison is
/// between the family's minimisers and not between whichever local minima
/// one start happens to reach. The arms run on separate threads.
pub fn coverage_ordering(
    teacher: &BinnedMixture,
    init: RestrictedStudent,
    steps: usize,
    lr: f64,
) -> Result<CoverageReport> {
    if teacher.weights().len() != 2 {
        return Err(Error::validation(
            "mixture",
            "coverage ordering needs two components",
        ));
    }
    let kinds = [
        DivergenceKind::ReverseKl,
        DivergenceKind::default(),
        DivergenceKind::ForwardKl,
    ];
    let fits = std::thread::scope(|scope| {
        let handles: Vec<_> = kinds
            .iter()
            .map(|kind| {
                let starts = default_starts(teacher, init);
                scope.spawn(move || fit_best(*kind, teacher, &starts, steps, lr))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fit thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let [reverse, jsd, forward]: [FitResult; 3] = fits.try_into().expect("three fits");
    Ok(CoverageReport {
        alpha: teacher.weights()[0],
        separation: (teacher.centers()[1] - teacher.centers()[0]).abs() / teacher.sigma(),
        reverse,
        jsd,
        forward,
    })
}

/// The 3 x 3 grid of dominant weights and separations.
pub const COVERAGE_ALPHAS: [f64; 3] = [0.55, 0.6, 0.7];
pub const COVERAGE_SEPARATIONS: [f64; 3] = [6.0, 8.0, 10.0];

pub fn coverage_grid(steps: usize, lr: f64) -> Result<Vec<CoverageReport>> {
    let mut out = Vec::with_capacity(9);
    for alpha in COVERAGE_ALPHAS {
        for sep in COVERAGE_SEPARATIONS {
            let teacher = BinnedMixture::two_modes(alpha, sep)?;
            out.push(coverage_ordering(
                &teacher,
                RestrictedStudent::neutral(&teacher),
                steps,
                lr,
            )?);
        }
    }
    Ok(out)
}

/// Reverse KL from a point mass on component `j`'s bin to a teacher made of
/// point masses with weights `alpha` (floored like every teacher here):
/// the `sigma -> 0` limit of the concentrated fit, `-log alpha_j`.
pub fn point_mass_limit(alpha: &[f64], j: usize, bins: usize) -> Result<f64> {
    if alpha.len() > bins || j >= alpha.len() {
        return Err(Error::validation("alpha", "one bin per component required"));
    }
    let mut raw = vec![0.0; bins];
    let stride = bins / alpha.len();
    for (i, a) in alpha.iter().enumerate() {
        raw[i * stride] = *a;
    }
    let p = floor_and_renormalize(&Distribution::new(raw)?, TEACHER_FLOOR)?;
    let q = Distribution::point_mass(bins, j * stride)?;
    divergence_value(DivergenceKind::ReverseKl, &p, &q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_validation() {
        let grid = Grid::new(-10.0, 10.0, 256).unwrap();
        assert!(BinnedMixture::new(vec![0.6, 0.4], vec![-2.0, 2.0], 1.0, grid).is_err());
        assert!(BinnedMixture::new(vec![0.6, 0.5], vec![-4.0, 4.0], 1.0, grid).is_err());
        assert!(BinnedMixture::new(vec![0.6, 0.4], vec![-9.0, 4.0], 1.0, grid).is_err());
        assert!(Grid::new(1.0, 1.0, 10).is_err());
    }

    #[test]
    fn mixture_masses_match_weights() {
        let t = BinnedMixture::two_modes(0.6, 8.0).unwrap();
        let m = t.mode_masses(t.distribution()).unwrap();
        // Each component leaks Phi(-4) ~ 3.2e-5 of its mass past the midpoint.
        assert!((m[0] - 0.6).abs() < 1e-4, "{m:?}");
        assert!((m[1] - 0.4).abs() < 1e-4);
        assert!((t.mean() + 0.8).abs() < 1e-12);
        assert!(t
            .distribution()
            .probs()
            .iter()
            .all(|v| *v >= TEACHER_FLOOR / 2.0));
    }

    #[test]
    fn student_distribution_is_valid_when_narrow() {
        let grid = Grid::new(-10.0, 10.0, 256).unwrap();
        let center = grid.centers()[128];
        let q = RestrictedStudent::new(center, -5.0)
            .unwrap()
            .distribution(&grid)
            .unwrap();
        assert!(q.probs().iter().all(|v| *v > 0.0));
        assert!(q.max_prob() > 0.99);
    }

    #[test]
    fn reverse_fit_concentrates() {
        let t = BinnedMixture::two_modes(0.6, 8.0).unwrap();
        let r = fit(
            DivergenceKind::ReverseKl,
            &t,
            RestrictedStudent::neutral(&t),
            DEFAULT_FIT_STEPS,
            DEFAULT_FIT_LR,
        )
        .unwrap();
        assert!(r.mode_masses[0] >= 0.95, "{:?}", r.mode_masses);
        assert!(
            (r.terminal_cost + 0.6_f64.ln()).abs() <= 0.05,
            "{}",
            r.terminal_cost
        );
    }

    #[test]
    fn tie_broken_by_init() {
        let t = BinnedMixture::two_modes(0.5, 8.0).unwrap();
        let base = RestrictedStudent::neutral(&t);
        for (nudge, expect) in [(-1.0, 0), (1.0, 1)] {
            let init = RestrictedStudent::new(base.mean + nudge, base.log_width).unwrap();
            let r = fit(
                DivergenceKind::ReverseKl,
                &t,
                init,
                DEFAULT_FIT_STEPS,
                DEFAULT_FIT_LR,
            )
            .unwrap();
            assert!(
                r.mode_masses[expect] >= 0.95,
                "nudge {nudge}: {:?}",
                r.mode_masses
            );
        }
    }

    #[test]
    fn single_mode_all_kinds_agree() {
        let t = BinnedMixture::single_mode().unwrap();
        let init = RestrictedStudent::new(0.7, 0.4).unwrap();
        let fits: Vec<FitResult> = [
            DivergenceKind::ReverseKl,
            DivergenceKind::default(),
            DivergenceKind::ForwardKl,
        ]
        .into_iter()
        .map(|k| fit(k, &t, init, DEFAULT_FIT_STEPS, DEFAULT_FIT_LR).unwrap())
        .collect();
        for f in &fits {
            assert!(f.student.mean.abs() < 1e-2, "{:?}", f.student);
            assert!(f.terminal_cost < 1e-3, "{}", f.terminal_cost);
        }
    }

    #[test]
    fn tabular_forward_recovers_teacher() {
        let t = BinnedMixture::two_modes(0.6, 8.0).unwrap();
        let r = fit_tabular_forward(&t, 2000, 50.0).unwrap();
        assert!(r.total_variation <= 0.01, "{}", r.total_variation);
        assert!(r.mode_masses.iter().all(|m| *m > 0.3));
    }

    #[test]
    fn point_mass_limit_is_log_alpha() {
        let c = point_mass_limit(&[0.6, 0.4], 0, 256).unwrap();
        assert!((c + 0.6_f64.ln()).abs() < 1e-9);
        let c = point_mass_limit(&[0.6, 0.4], 1, 256).unwrap();
        assert!((c + 0.4_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_bad_lr() {
        let t = BinnedMixture::single_mode().unwrap();
        assert!(fit(
            DivergenceKind::ForwardKl,
            &t,
            RestrictedStudent::neutral(&t),
            1,
            0.0
        )
        .is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]

        #[test]
        fn reverse_concentrates_on_dominant_mode(alpha in 0.55f64..0.85, sep in 6.0f64..10.0) {
            let t = BinnedMixture::two_modes(alpha, sep).unwrap();
            let f = fit(
                DivergenceKind::ReverseKl,
                &t,
                RestrictedStudent::neutral(&t),
                DEFAULT_FIT_STEPS,
                DEFAULT_FIT_LR,
            )
            .unwrap();
            proptest::prop_assert!(f.mode_masses[t.dominant()] >= 0.95);
            proptest::prop_assert!((f.terminal_cost + alpha.ln()).abs() <= 0.05);
        }
    }
}

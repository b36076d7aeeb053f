//! Named, reproducible runs: configuration, seeding, artifact emission and
//! the EMA used for loss-curve reporting.
//!
//! A run writes everything under its own output directory:
//!
//! - `run.json`: the resolved configuration (re-ingestible as a config file),
//!   crate version, seed, status and a summary;
//! - `metrics.csv`: one fixed header per experiment, doubles in shortest
//!   round-trip form, so identical config and seed give identical bytes;
//! - experiment reports (`bounds.json`, `gradcheck.json`, `modes.json`,
//!   `debate.json`, `opad.json`, ...).
//!
//! The directory holds a `.lock` file while the run is in progress; a second
//! run pointed at the same directory is refused.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::debate::{
    consensus, run_debate, DebateSettings, DebateState, MockTeacher, Teacher,
    DEFAULT_REVISION_RATE, DEFAULT_ROUNDS, DEFAULT_TEACHERS,
};
use crate::divergence::{
    forward_bound_probe, gradient_check_sweep, jsd_bound_probe, revkl_unboundedness_probe,
    DivergenceKind,
};
use crate::error::{Error, Result};
use crate::modegeom::{
    coverage_grid, fit, fit_tabular_forward, BinnedMixture, RestrictedStudent, DEFAULT_FIT_LR,
    DEFAULT_FIT_STEPS, DEFAULT_SEPARATION,
};
use crate::opad::{
    complementary_fixture_with, privileged_gap_fixture, train, two_strategy_fixture, AbortRecord,
    Fixture, OpadConfig, Reduction, WeightingMode, DEFAULT_ITERATIONS, DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_STEPS,
};
use crate::simplex::{RngSeed, DEFAULT_FLOOR};
use crate::weighting::{confidence_to_weights, DEFAULT_CONFIDENCE_TEMPERATURE};

pub const DEFAULT_EMA_ALPHA: f64 = 0.15;
pub const DEFAULT_PROBE_TRIALS: usize = 100_000;
pub const DEFAULT_GRADCHECK_CASES: usize = 1000;
/// Vocabulary sizes of the bound probes.
pub const PROBE_VOCAB_SIZES: [usize; 8] = [2, 3, 4, 8, 16, 32, 48, 64];
/// Vocabulary sizes of the gradient check.
pub const GRADCHECK_VOCAB_SIZES: [usize; 6] = [2, 3, 5, 8, 16, 64];
/// Teacher masses of the reverse-KL unboundedness family.
pub const REVKL_DELTAS: [f64; 9] = [0.5, 0.1, 1e-2, 1e-3, 1e-6, 1e-12, 1e-30, 1e-100, 1e-300];
pub const VERSION: &str = concat!("madlab ", env!("CARGO_PKG_VERSION"));
const LOCK_FILE: &str = ".lock";

/// Exponentially smoothed series, `s_0 = y_0`,
/// `s_t = alpha y_t + (1 - alpha) s_{t-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaSeries {
    pub alpha: f64,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

pub fn ema(y: &[f64], alpha: f64) -> Result<EmaSeries> {
    if y.is_empty() {
        return Err(Error::validation("series", "must not be empty"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::validation(
            "alpha",
            format!("{alpha} outside (0, 1]"),
        ));
    }
    let mut smoothed = Vec::with_capacity(y.len());
    let mut s = y[0];
    smoothed.push(s);
    for &v in &y[1..] {
        s = alpha * v + (1.0 - alpha) * s;
        smoothed.push(s);
    }
    Ok(EmaSeries {
        alpha,
        raw: y.to_vec(),
        smoothed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Bounds,
    Gradcheck,
    Modes,
    DebateDemo,
    #[default]
    Opad,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Bounds,
        Experiment::Gradcheck,
        Experiment::Modes,
        Experiment::DebateDemo,
        Experiment::Opad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Bounds => "bounds",
            Experiment::Gradcheck => "gradcheck",
            Experiment::Modes => "modes",
            Experiment::DebateDemo => "debate-demo",
            Experiment::Opad => "opad",
        }
    }

    /// The `metrics.csv` header row.
    pub fn csv_header(self) -> &'static [&'static str] {
        match self {
            Experiment::Bounds => &["probe", "param", "value"],
            Experiment::Gradcheck => &["kind", "case", "vocab", "checked", "max_rel_err"],
            Experiment::Modes => &["kind", "step", "mean", "log_width", "cost", "lr"],
            Experiment::DebateDemo => &[
                "state",
                "teacher",
                "round",
                "argmax",
                "confidence",
                "correct",
            ],
            Experiment::Opad => &["iter", "step", "token", "kind", "loss", "grad_inf", "acc"],
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                Error::validation(
                    "experiment",
                    format!("`{s}` is not one of {}", names.join(", ")),
                )
            })
    }
}

/// Teacher set used by `debate-demo` and `opad`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureName {
    /// `teachers` experts, each competent on one block of states.
    #[default]
    Complementary,
    /// `teachers` experts that are all near-certain everywhere.
    PrivilegedGap,
    /// Two experts backing different accepted strategies; ignores
    /// `revision_rate` (the fixture never revises) and needs `teachers = 2`.
    TwoStrategy,
}

/// Flat run configuration; every key is optional and unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub kind: DivergenceKind,
    /// Number of teachers `K`.
    pub teachers: usize,
    /// Debate rounds `R`.
    pub rounds: usize,
    /// Mock-teacher revision rate `lambda`.
    pub revision_rate: f64,
    pub tau_conf: f64,
    pub eps: f64,
    /// Student learning rate.
    pub eta: f64,
    /// Steps per trajectory `M`.
    pub max_steps: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Defaults to `runs/<experiment>`.
    pub out_dir: Option<PathBuf>,
    pub fixture: FixtureName,
    pub weighting: WeightingMode,
    pub reduction: Reduction,
    pub grad_clip: Option<f64>,
    pub cache_debates: bool,
    pub parallel_debate: bool,
    /// Pairs per bound probe.
    pub probe_trials: usize,
    pub gradcheck_cases: usize,
    /// Dominant weight and separation (in sigmas) of the `modes` teacher.
    pub mode_alpha: f64,
    pub mode_separation: f64,
    pub fit_steps: usize,
    pub fit_lr: f64,
    /// Also run the 3 x 3 coverage-ordering grid in `modes`.
    pub coverage_grid: bool,
    pub ema_alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::default(),
            kind: DivergenceKind::default(),
            teachers: DEFAULT_TEACHERS,
            rounds: DEFAULT_ROUNDS,
            revision_rate: DEFAULT_REVISION_RATE,
            tau_conf: DEFAULT_CONFIDENCE_TEMPERATURE,
            eps: DEFAULT_FLOOR,
            eta: DEFAULT_LEARNING_RATE,
            max_steps: DEFAULT_MAX_STEPS,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            out_dir: None,
            fixture: FixtureName::default(),
            weighting: WeightingMode::default(),
            reduction: Reduction::default(),
            grad_clip: None,
            cache_debates: true,
            parallel_debate: false,
            probe_trials: DEFAULT_PROBE_TRIALS,
            gradcheck_cases: DEFAULT_GRADCHECK_CASES,
            mode_alpha: 0.6,
            mode_separation: DEFAULT_SEPARATION,
            fit_steps: DEFAULT_FIT_STEPS,
            fit_lr: DEFAULT_FIT_LR,
            coverage_grid: true,
            ema_alpha: DEFAULT_EMA_ALPHA,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub kind: Option<DivergenceKind>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a flat config object, or a previous `run.json` (whose
    /// `config` key holds one).
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::validation("config", e.to_string()))?;
        let inner = match value.get("config") {
            Some(config) if value.get("version").is_some() => config.clone(),
            _ => value,
        };
        let config: RunConfig = serde_json::from_value(inner)
            .map_err(|e| Error::validation("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::validation("config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(e) = o.experiment {
            self.experiment = e;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.kind {
            self.kind = k;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = Some(d.clone());
        }
        self
    }

    pub fn output_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(self.experiment.name()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(
                    field,
                    format!("{v} must be positive and finite"),
                ))
            }
        };
        let at_least_one = |field: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::validation(field, "must be at least 1"))
            }
        };
        if let DivergenceKind::Jsd { beta } = self.kind {
            DivergenceKind::jsd(beta)?;
        }
        if !(1..=crate::opad::FIXTURE_STATES).contains(&self.teachers) {
            return Err(Error::validation(
                "teachers",
                format!(
                    "{} outside 1..={}",
                    self.teachers,
                    crate::opad::FIXTURE_STATES
                ),
            ));
        }
        if self.fixture == FixtureName::TwoStrategy && self.teachers != 2 {
            return Err(Error::validation(
                "teachers",
                "the two_strategy fixture has exactly 2 teachers",
            ));
        }
        at_least_one("rounds", self.rounds)?;
        if !(0.0..=1.0).contains(&self.revision_rate) {
            return Err(Error::validation(
                "revision_rate",
                format!("{} outside [0, 1]", self.revision_rate),
            ));
        }
        positive("tau_conf", self.tau_conf)?;
        // Below 1/|V| for the 4-way token heads of the fixtures.
        if !(self.eps >= 0.0 && self.eps < 0.25) {
            return Err(Error::validation(
                "eps",
                format!("{} outside [0, 0.25)", self.eps),
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::validation(
                "eta",
                format!("{} must be finite and >= 0", self.eta),
            ));
        }
        at_least_one("max_steps", self.max_steps)?;
        at_least_one("iterations", self.iterations)?;
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c)?;
        }
        at_least_one("probe_trials", self.probe_trials)?;
        at_least_one("gradcheck_cases", self.gradcheck_cases)?;
        if !(self.mode_alpha > 0.0 && self.mode_alpha < 1.0) {
            return Err(Error::validation(
                "mode_alpha",
                format!("{} outside (0, 1)", self.mode_alpha),
            ));
        }
        positive("mode_separation", self.mode_separation)?;
        at_least_one("fit_steps", self.fit_steps)?;
        positive("fit_lr", self.fit_lr)?;
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::validation(
                "ema_alpha",
                format!("{} outside (0, 1]", self.ema_alpha),
            ));
        }
        if let Some(dir) = &self.out_dir {
            if dir.as_os_str().is_empty() {
                return Err(Error::validation("out_dir", "must not be empty"));
            }
        }
        Ok(())
    }

    fn opad_config(&self) -> OpadConfig {
        OpadConfig {
            kind: self.kind,
            rounds: self.rounds,
            tau_conf: self.tau_conf,
            eps: self.eps,
            learning_rate: self.eta,
            grad_clip: self.grad_clip,
            iterations: self.iterations,
            seed: self.seed,
            weighting: self.weighting,
            reduction: self.reduction,
            cache_debates: self.cache_debates,
            parallel_debate: self.parallel_debate,
            record_history: false,
        }
    }

    fn fixture(&self) -> Result<Fixture> {
        let mut fixture = match self.fixture {
            FixtureName::Complementary => {
                complementary_fixture_with(self.teachers, self.revision_rate)?
            }
            FixtureName::PrivilegedGap => {
                let mut f = privileged_gap_fixture(self.teachers)?;
                for t in &mut f.teachers {
                    let mut spec = t.spec().clone();
                    spec.revision_rate = self.revision_rate;
                    *t = MockTeacher::new(t.id().clone(), spec)?;
                }
                f
            }
            FixtureName::TwoStrategy => two_strategy_fixture()?,
        };
        fixture.env = fixture.env.with_max_steps(self.max_steps)?;
        Ok(fixture)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    NumericAbort,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Completed => 0,
            RunStatus::NumericAbort => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub status: RunStatus,
    pub summary: serde_json::Value,
    pub abort: Option<AbortRecord>,
}

/// Exclusive claim on an output directory, released on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::validation(
                "out_dir",
                format!(
                    "{} is in use by another run (delete {} if stale)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        if let Err(e) = fs::remove_file(&self.path) {
            log::warn!("could not remove {}: {e}", self.path.display());
        }
    }
}

/// Writes rows under the experiment's fixed header.
struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    fn create(dir: &Path, experiment: Experiment) -> Result<Self> {
        let mut inner = csv_writer(&dir.join("metrics.csv"))?;
        inner
            .write_record(experiment.csv_header())
            .map_err(csv_error)?;
        Ok(Self { inner })
    }

    fn row<S: Serialize>(&mut self, row: S) -> Result<()> {
        self.inner.serialize(row).map_err(csv_error)
    }

    fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// The header is always written explicitly, never inferred from a row type.
fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// What an experiment hands back to [`run`].
struct ExperimentResult {
    summary: serde_json::Value,
    abort: Option<AbortRecord>,
}

/// Runs `config.experiment` into its output directory.
///
/// Configuration and I/O problems are errors. A numeric abort is not: the
/// partial artifacts and the abort record are written and the outcome
/// carries [`RunStatus::NumericAbort`].
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let dir = config.output_dir();
    let _lock = OutputLock::acquire(&dir)?;
    log::info!("{} -> {}", config.experiment, dir.display());
    let result = match config.experiment {
        Experiment::Bounds => run_bounds(config, &dir),
        Experiment::Gradcheck => run_gradcheck(config, &dir),
        Experiment::Modes => run_modes(config, &dir),
        Experiment::DebateDemo => run_debate_demo(config, &dir),
        Experiment::Opad => run_opad(config, &dir),
    };
    let result = match result {
        Ok(r) => r,
        Err(Error::NumericAbort {
            iteration,
            step,
            reason,
        }) => ExperimentResult {
            summary: serde_json::Value::Null,
            abort: Some(AbortRecord {
                iteration,
                step,
                reason,
            }),
        },
        Err(e) => return Err(e),
    };
    let status = if result.abort.is_some() {
        RunStatus::NumericAbort
    } else {
        RunStatus::Completed
    };
    let mut echo = config.clone();
    echo.out_dir = Some(dir.clone());
    write_json(
        &dir.join("run.json"),
        &json!({
            "config": echo,
            "version": VERSION,
            "seed": config.seed,
            "status": status,
            "abort": result.abort,
            "summary": result.summary,
        }),
    )?;
    Ok(RunOutcome {
        out_dir: dir,
        status,
        summary: result.summary,
        abort: result.abort,
    })
}

fn run_bounds(config: &RunConfig, dir: &Path) -> Result<ExperimentResult> {
    let seed = RngSeed(config.seed);
    let beta = config.kind.beta().unwrap_or(0.5);
    let jsd = jsd_bound_probe(
        beta,
        config.probe_trials,
        &PROBE_VOCAB_SIZES,
        &mut seed.stream("probes/jsd_bound"),
    )?;
    let fwd = forward_bound_probe(
        config.probe_trials,
        &PROBE_VOCAB_SIZES,
        &mut seed.stream("probes/fwd_bound"),
    )?;
    let rev = revkl_unboundedness_probe(&REVKL_DELTAS)?;
    let mut csv = MetricsWriter::create(dir, Experiment::Bounds)?;
    let b = format!("beta={beta}");
    for (probe, value) in [
        ("jsd_max_loss", jsd.max_loss),
        ("jsd_loss_bound", jsd.loss_bound),
        ("jsd_disjoint_loss", jsd.disjoint_loss),
        ("jsd_max_grad_inf", jsd.max_inf_norm),
        ("jsd_grad_bound", jsd.grad_bound),
    ] {
        csv.row((probe, &b, value))?;
    }
    csv.row(("fwd_max_grad_inf", "", fwd.max_inf_norm))?;
    for p in &rev.points {
        csv.row(("revkl_grad_inf", format!("delta={}", p.delta), p.inf_norm))?;
    }
    csv.finish()?;
    write_json(&dir.join("jsd_bound_probe.json"), &jsd)?;
    write_json(&dir.join("forward_bound_probe.json"), &fwd)?;
    write_json(&dir.join("revkl_unboundedness_probe.json"), &rev)?;
    Ok(ExperimentResult {
        summary: json!({
            "jsd_max_loss": jsd.max_loss,
            "jsd_loss_bound": jsd.loss_bound,
            "jsd_max_grad_inf": jsd.max_inf_norm,
            "jsd_grad_bound": jsd.grad_bound,
            "fwd_max_grad_inf": fwd.max_inf_norm,
            "revkl_monotone": rev.is_monotone(),
            "revkl_max_grad_inf": rev.points.iter().map(|p| p.inf_norm).fold(0.0, f64::max),
        }),
        abort: None,
    })
}

fn run_gradcheck(config: &RunConfig, dir: &Path) -> Result<ExperimentResult> {
    let seed = RngSeed(config.seed);
    let jsd = config.kind_or_jsd();
    let mut csv = MetricsWriter::create(dir, Experiment::Gradcheck)?;
    let mut reports = Vec::new();
    for kind in [DivergenceKind::ForwardKl, DivergenceKind::ReverseKl, jsd] {
        let mut rng = seed.stream(&format!("probes/gradcheck/{}", kind.label()));
        let r = gradient_check_sweep(
            kind,
            config.gradcheck_cases,
            &GRADCHECK_VOCAB_SIZES,
            &mut rng,
        )?;
        for c in &r.cases {
            csv.row((kind.to_string(), c.case, c.vocab, c.checked, c.max_rel_err))?;
        }
        reports.push(r);
    }
    csv.finish()?;
    let summary: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "kind": r.kind,
                "cases": r.n_cases,
                "checked": r.checked,
                "max_rel_err": r.max_rel_err,
                "worst_case": r.worst_case,
            })
        })
        .collect();
    let detail: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "kind": r.kind,
                "cases": r.n_cases,
                "checked": r.checked,
                "max_rel_err": r.max_rel_err,
                "worst_case": r.worst_case,
                "worst_p": r.worst_p,
                "worst_z": r.worst_z,
            })
        })
        .collect();
    write_json(&dir.join("gradcheck.json"), &detail)?;
    Ok(ExperimentResult {
        summary: json!(summary),
        abort: None,
    })
}

fn run_modes(config: &RunConfig, dir: &Path) -> Result<ExperimentResult> {
    let teacher = BinnedMixture::two_modes(config.mode_alpha, config.mode_separation)?;
    let init = RestrictedStudent::neutral(&teacher);
    let mut csv = MetricsWriter::create(dir, Experiment::Modes)?;
    let mut fits = Vec::new();
    for kind in [
        DivergenceKind::ReverseKl,
        config.kind_or_jsd(),
        DivergenceKind::ForwardKl,
    ] {
        let result = fit(kind, &teacher, init, config.fit_steps, config.fit_lr);
        let f = match result {
            Ok(f) => f,
            Err(e) => {
                csv.finish()?;
                return Err(e);
            }
        };
        for t in &f.trace {
            csv.row((kind.to_string(), t.step, t.mean, t.log_width, t.cost, t.lr))?;
        }
        fits.push(f);
    }
    csv.finish()?;
    let dominant = teacher.dominant();
    let target = -teacher.weights()[dominant].ln();
    let tabular = fit_tabular_forward(&teacher, 2000, 50.0)?;
    let fit_json: Vec<_> = fits
        .iter()
        .map(|f| {
            json!({
                "kind": f.kind,
                "mean": f.student.mean,
                "width": f.student.width(),
                "terminal_cost": f.terminal_cost,
                "mode_masses": f.mode_masses,
                "dominant_mass": f.mode_masses[dominant],
            })
        })
        .collect();
    let mut report = json!({
        "alpha": config.mode_alpha,
        "separation": config.mode_separation,
        "dominant_cost": target,
        "fits": fit_json,
        "tabular_forward": {
            "total_variation": tabular.total_variation,
            "mode_masses": tabular.mode_masses,
        },
    });
    let mut summary = json!({
        "reverse_dominant_mass": fits[0].mode_masses[dominant],
        "reverse_terminal_cost": fits[0].terminal_cost,
        "dominant_cost": target,
    });
    if config.coverage_grid {
        let grid = coverage_grid(config.fit_steps, config.fit_lr)?;
        let cells: Vec<_> = grid
            .iter()
            .map(|c| {
                json!({
                    "alpha": c.alpha,
                    "separation": c.separation,
                    "secondary": c.secondary_masses(),
                    "ordered": c.ordered(),
                })
            })
            .collect();
        let ordered = grid.iter().filter(|c| c.ordered()).count();
        report["coverage"] = json!(cells);
        summary["coverage_ordered_cells"] = json!(ordered);
        summary["coverage_cells"] = json!(grid.len());
    }
    write_json(&dir.join("modes.json"), &report)?;
    Ok(ExperimentResult {
        summary,
        abort: None,
    })
}

impl RunConfig {
    /// The JSD arm of a three-way comparison: the configured kind when it is
    /// a JSD, `jsd:0.5` otherwise.
    fn kind_or_jsd(&self) -> DivergenceKind {
        match self.kind {
            k @ DivergenceKind::Jsd { .. } => k,
            _ => DivergenceKind::default(),
        }
    }
}

fn run_debate_demo(config: &RunConfig, dir: &Path) -> Result<ExperimentResult> {
    let fixture = config.fixture()?;
    let env = &fixture.env;
    let settings = DebateSettings {
        rounds: config.rounds,
        tau_conf: config.tau_conf,
        parallel: config.parallel_debate,
    };
    let answers = env.primary_joint_answers();
    let mut csv = MetricsWriter::create(dir, Experiment::DebateDemo)?;
    let mut text = String::new();
    let mut jsonl = String::new();
    let mut per_state = Vec::new();
    let mut hits = 0usize;
    for (s, answer) in answers.iter().enumerate() {
        let state = DebateState::new(s, format!("state {s}"));
        let outcome = run_debate(&fixture.teachers, &state, &settings)?;
        let t = &outcome.transcript;
        for round in t.rounds() {
            for u in round {
                let joint = utterance_joint(env, &u.content)?;
                let correct = env.correct(s)?.contains(&env.action_of(joint));
                csv.row((s, &u.teacher.name, u.round, joint, u.confidence, correct))?;
            }
        }
        let weights = confidence_to_weights(&outcome.confidences);
        let mix = consensus(&outcome.post_debate, &weights)?;
        let pick = mix.argmax();
        let correct = env.correct(s)?.contains(&env.action_of(pick));
        hits += usize::from(correct);
        let conf = (100.0 * mix.max_prob() * 100.0).round() / 100.0;
        csv.row((s, "consensus", config.rounds, pick, conf, correct))?;
        text.push_str(&t.to_text()?);
        text.push('\n');
        jsonl.push_str(&t.to_jsonl()?);
        per_state.push(json!({
            "state": s,
            "confidences": outcome.confidences.scores(),
            "weights": weights.as_slice(),
            "consensus": pick,
            "answer": answer,
            "correct": correct,
        }));
    }
    csv.finish()?;
    fs::write(dir.join("transcripts.txt"), text)?;
    fs::write(dir.join("transcripts.jsonl"), jsonl)?;
    let standalone: Vec<f64> = fixture
        .teachers
        .iter()
        .map(|t| t.standalone_accuracy(&answers))
        .collect();
    let accuracy = hits as f64 / env.n_states() as f64;
    let summary = json!({
        "consensus_accuracy": accuracy,
        "teacher_accuracy": standalone,
        "best_teacher_accuracy": fixture.best_teacher_accuracy(),
    });
    write_json(
        &dir.join("debate.json"),
        &json!({ "summary": summary, "states": per_state }),
    )?;
    Ok(ExperimentResult {
        summary,
        abort: None,
    })
}

/// Joint id of a decoded `(tool, arg)` utterance.
fn utterance_joint(env: &crate::opad::ToolWorld, content: &[usize]) -> Result<usize> {
    match content {
        [tool, arg] if *tool < env.tools() && *arg < env.args() => {
            Ok(env.joint_id(crate::opad::Action::new(*tool, *arg)))
        }
        _ => Err(Error::validation(
            "utterance",
            format!("{content:?} is not a (tool, arg) pair"),
        )),
    }
}

fn run_opad(config: &RunConfig, dir: &Path) -> Result<ExperimentResult> {
    let fixture = config.fixture()?;
    let before = fixture.teacher_fingerprints();
    let artifact = train(&fixture.env, &fixture.teachers, &config.opad_config())?;
    let after = fixture.teacher_fingerprints();
    if before != after {
        return Err(Error::validation(
            "teachers",
            "teacher tables changed during training",
        ));
    }
    let mut csv = MetricsWriter::create(dir, Experiment::Opad)?;
    for m in &artifact.metrics {
        csv.row(m)?;
    }
    csv.finish()?;
    let mut loss_csv = csv_writer(&dir.join("trajectory_loss.csv"))?;
    loss_csv
        .write_record(["iter", "loss", "ema"])
        .map_err(csv_error)?;
    let smoothed = if artifact.trajectory_losses.is_empty() {
        None
    } else {
        let e = ema(&artifact.trajectory_losses, config.ema_alpha)?;
        for (i, (y, s)) in e.raw.iter().zip(&e.smoothed).enumerate() {
            loss_csv.serialize((i, y, s)).map_err(csv_error)?;
        }
        e.smoothed.last().copied()
    };
    loss_csv.flush()?;
    let summary = json!({
        "fixture": config.fixture,
        "kind": artifact.kind,
        "initial_accuracy": artifact.initial_accuracy,
        "final_accuracy": artifact.final_accuracy(),
        "best_teacher_accuracy": fixture.best_teacher_accuracy(),
        "spike_ratio": artifact.spike_ratio(),
        "max_grad_inf": artifact.max_grad_inf(),
        "final_loss_ema": smoothed,
        "iterations_completed": artifact.trajectory_losses.len(),
    });
    write_json(
        &dir.join("opad.json"),
        &json!({
            "summary": summary,
            "teacher_fingerprints": before,
            "abort": artifact.abort,
        }),
    )?;
    write_json(&dir.join("policy.json"), &artifact.final_policy)?;
    Ok(ExperimentResult {
        summary,
        abort: artifact.abort,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ema_unrolled_impulse() {
        let e = ema(&[1.0, 0.0, 0.0, 0.0], 0.15).unwrap();
        let expected = [1.0, 0.85, 0.7225, 0.614125];
        for (s, x) in e.smoothed.iter().zip(expected) {
            assert!((s - x).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_alpha_one_is_identity() {
        let y = [3.0, -1.0, 7.5, 0.25];
        assert_eq!(ema(&y, 1.0).unwrap().smoothed, y.to_vec());
    }

    #[test]
    fn ema_rejects_bad_input() {
        assert!(ema(&[], 0.15).is_err());
        assert!(ema(&[1.0], 0.0).is_err());
        assert!(ema(&[1.0], 1.5).is_err());
    }

    proptest! {
        #[test]
        fn ema_constant_is_fixed_point(c in -1e6f64..1e6, n in 1usize..50, alpha in 0.01f64..=1.0) {
            let e = ema(&vec![c; n], alpha).unwrap();
            for s in e.smoothed {
                prop_assert!((s - c).abs() <= 1e-9 * c.abs().max(1.0));
            }
        }

        #[test]
        fn ema_stays_within_range(y in proptest::collection::vec(-100f64..100.0, 1..60), alpha in 0.01f64..=1.0) {
            let e = ema(&y, alpha).unwrap();
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(e.smoothed[0], y[0]);
            for s in e.smoothed {
                prop_assert!(s >= lo - 1e-9 && s <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
            let json = serde_json::to_string(&e).unwrap();
            assert_eq!(json, format!("\"{}\"", e.name()));
        }
        assert!("nope".parse::<Experiment>().is_err());
    }

    #[test]
    fn config_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.teachers, 2);
        assert_eq!(c.rounds, 2);
        assert_eq!(c.tau_conf, 1.0);
        assert_eq!(c.kind, DivergenceKind::Jsd { beta: 0.5 });
        assert_eq!(c.ema_alpha, 0.15);
        assert_eq!(c.output_dir(), PathBuf::from("runs/opad"));
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = RunConfig::from_json(r#"{"seed": 1, "temperature": 2.0}"#).unwrap_err();
        assert!(err.to_string().contains("temperature"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        for (text, field) in [
            (r#"{"rounds": 0}"#, "rounds"),
            (r#"{"revision_rate": 1.5}"#, "revision_rate"),
            (r#"{"tau_conf": 0}"#, "tau_conf"),
            (r#"{"kind": "jsd:1.5"}"#, "beta"),
            (r#"{"kind": "kl"}"#, "kind"),
            (r#"{"teachers": 0}"#, "teachers"),
            (r#"{"fixture": "two_strategy", "teachers": 3}"#, "teachers"),
            (r#"{"eps": 0.5}"#, "eps"),
            (r#"{"experiment": "plot"}"#, "plot"),
        ] {
            let err = RunConfig::from_json(text).unwrap_err();
            assert!(err.to_string().contains(field), "{text}: {err}");
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let c = RunConfig::from_json(r#"{"seed": 1, "kind": "fwd"}"#).unwrap();
        let c = c.with_overrides(&Overrides {
            seed: Some(9),
            kind: Some(DivergenceKind::ReverseKl),
            ..Overrides::default()
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.kind, DivergenceKind::ReverseKl);
    }

    #[test]
    fn run_json_is_accepted_as_config() {
        let mut c = RunConfig {
            seed: 4,
            kind: DivergenceKind::ReverseKl,
            ..RunConfig::default()
        };
        c.out_dir = Some(PathBuf::from("x"));
        let run_json = json!({"config": c, "version": VERSION, "seed": 4, "summary": {}});
        let back = RunConfig::from_json(&run_json.to_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn lock_refuses_second_claim() {
        let dir = tempfile::tempdir().unwrap();
        let first = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(first);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn bounds_run_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig {
            experiment: Experiment::Bounds,
            probe_trials: 300,
            out_dir: Some(dir.path().to_path_buf()),
            ..RunConfig::default()
        };
        let out = run(&c).unwrap();
        assert_eq!(out.status, RunStatus::Completed);
        for f in [
            "run.json",
            "metrics.csv",
            "jsd_bound_probe.json",
            "revkl_unboundedness_probe.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(!dir.path().join(LOCK_FILE).exists());
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("probe,param,value\njsd_max_loss,"), "{csv}");
        assert_eq!(csv.matches("probe,param,value").count(), 1);
    }
}

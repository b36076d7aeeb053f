//! On-policy trajectory distillation with per-step teacher debate.
//!
//! A synthetic tool-use world hands the student a state; the student emits a
//! two-token action (tool, then argument) and the world answers `ok` or
//! `err`. For every step of the student's own rollout the teachers debate
//! the state (seeing the realised observation history), then score the
//! student's sampled action token by token. The per-step loss is the token
//! mean of the confidence-weighted multi-teacher divergence; the trajectory
//! loss sums the per-step losses and drives one sparse gradient update of
//! the student's logit table.
//!
//! The student never sees a [`DebateTranscript`]: every student-facing
//! function here takes a state key only.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::debate::{
    run_debate, DebateOutcome, DebateSettings, DebateState, DebateTranscript, MockTeacher,
    MockTeacherSpec, Teacher, TeacherId,
};
use crate::divergence::{inf_norm, logit_gradient, DivergenceKind};
use crate::error::{Error, Result};
use crate::simplex::{
    floor_and_renormalize, sample, softmax, Distribution, LogitVector, RngSeed, DEFAULT_FLOOR,
};
use crate::weighting::{confidence_to_weights, mad_token_loss, TeacherWeights};

pub const DEFAULT_MAX_STEPS: usize = 4;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_ITERATIONS: usize = 500;

/// Tokens per action: the tool, then its argument.
pub const ACTION_TOKENS: usize = 2;

/// Logit margin used by [`StudentPolicy::oracle`].
const ORACLE_MARGIN: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub tool: usize,
    pub arg: usize,
}

impl Action {
    pub fn new(tool: usize, arg: usize) -> Self {
        Self { tool, arg }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.tool, self.arg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    Ok,
    Err,
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Observation::Ok => "ok",
            Observation::Err => "err",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// `s -> s + 1 mod n` regardless of the action.
    #[default]
    Cyclic,
    /// Advance on `ok`, stay on `err`.
    AdvanceOnSuccess,
}

/// Deterministic tool-use environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolWorld {
    tools: usize,
    args: usize,
    /// Accepted actions per state. Usually one; the two-strategy fixture
    /// accepts two.
    correct: Vec<Vec<Action>>,
    transition: Transition,
    max_steps: usize,
}

impl ToolWorld {
    pub fn new(
        tools: usize,
        args: usize,
        correct: Vec<Vec<Action>>,
        transition: Transition,
        max_steps: usize,
    ) -> Result<Self> {
        if tools < 2 || args < 2 {
            return Err(Error::validation(
                "vocab",
                "need at least 2 tools and 2 args",
            ));
        }
        if correct.is_empty() {
            return Err(Error::validation("correct", "need at least one state"));
        }
        if max_steps == 0 {
            return Err(Error::validation("max_steps", "must be at least 1"));
        }
        for (s, accepted) in correct.iter().enumerate() {
            if accepted.is_empty() {
                return Err(Error::validation(
                    "correct",
                    format!("state {s} accepts no action"),
                ));
            }
            if let Some(a) = accepted.iter().find(|a| a.tool >= tools || a.arg >= args) {
                return Err(Error::validation(
                    "correct",
                    format!("state {s}: action {a} out of range"),
                ));
            }
        }
        Ok(Self {
            tools,
            args,
            correct,
            transition,
            max_steps,
        })
    }

    /// The same world with a different episode length.
    pub fn with_max_steps(self, max_steps: usize) -> Result<Self> {
        Self::new(
            self.tools,
            self.args,
            self.correct,
            self.transition,
            max_steps,
        )
    }

    /// One accepted action per state.
    pub fn with_single_answers(
        tools: usize,
        args: usize,
        correct: &[Action],
        transition: Transition,
        max_steps: usize,
    ) -> Result<Self> {
        Self::new(
            tools,
            args,
            correct.iter().map(|a| vec![*a]).collect(),
            transition,
            max_steps,
        )
    }

    pub fn n_states(&self) -> usize {
        self.correct.len()
    }

    pub fn tools(&self) -> usize {
        self.tools
    }

    pub fn args(&self) -> usize {
        self.args
    }

    /// Size of the joint (tool, arg) vocabulary teachers answer over.
    pub fn joint_vocab(&self) -> usize {
        self.tools * self.args
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn transition(&self) -> Transition {
        self.transition
    }

    pub fn correct(&self, state: usize) -> Result<&[Action]> {
        self.correct
            .get(state)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownState(state.to_string()))
    }

    /// First accepted action per state, as joint token ids.
    pub fn primary_joint_answers(&self) -> Vec<usize> {
        self.correct.iter().map(|a| self.joint_id(a[0])).collect()
    }

    pub fn observe(&self, state: usize, action: Action) -> Result<Observation> {
        Ok(if self.correct(state)?.contains(&action) {
            Observation::Ok
        } else {
            Observation::Err
        })
    }

    pub fn next_state(&self, state: usize, observation: Observation) -> usize {
        match (self.transition, observation) {
            (Transition::Cyclic, _) | (Transition::AdvanceOnSuccess, Observation::Ok) => {
                (state + 1) % self.n_states()
            }
            (Transition::AdvanceOnSuccess, Observation::Err) => state,
        }
    }

    pub fn joint_id(&self, action: Action) -> usize {
        action.tool * self.args + action.arg
    }

    pub fn action_of(&self, joint: usize) -> Action {
        Action::new(joint / self.args, joint % self.args)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: Action,
    pub observation: Observation,
}

/// `(a_1, o_1, ..., a_M, o_M)` with the state each action was taken in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// Label of the debate held before step `m` (0-based): the state plus
    /// every observation realised so far.
    pub fn debate_label(&self, m: usize) -> String {
        let history: Vec<String> = self.steps[..m]
            .iter()
            .map(|s| s.observation.to_string())
            .collect();
        format!(
            "state {} after [{}]",
            self.steps[m].state,
            history.join(" ")
        )
    }

    pub fn ok_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.observation == Observation::Ok)
            .count()
    }
}

/// Logits of one state: the tool head and one argument head per tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub tool: LogitVector,
    pub args: Vec<LogitVector>,
}

/// Tabular student. Conditions on the state key only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentPolicy {
    rows: Vec<PolicyRow>,
    learning_rate: f64,
    grad_clip: Option<f64>,
}

impl StudentPolicy {
    pub fn new(rows: Vec<PolicyRow>, learning_rate: f64, grad_clip: Option<f64>) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::validation(
                "eta",
                format!("{learning_rate} must be finite and >= 0"),
            ));
        }
        if let Some(c) = grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::validation(
                    "grad_clip",
                    format!("{c} must be positive"),
                ));
            }
        }
        if rows.is_empty() {
            return Err(Error::validation("policy", "no rows"));
        }
        Ok(Self {
            rows,
            learning_rate,
            grad_clip,
        })
    }

    /// All-zero logits: uniform over tools and over args.
    pub fn uniform(env: &ToolWorld, learning_rate: f64) -> Result<Self> {
        let row = PolicyRow {
            tool: LogitVector::zeros(env.tools())?,
            args: vec![LogitVector::zeros(env.args())?; env.tools()],
        };
        Self::new(vec![row; env.n_states()], learning_rate, None)
    }

    /// Greedy and, up to `exp(-50)`, sampled choice of the first accepted
    /// action in every state.
    pub fn oracle(env: &ToolWorld) -> Result<Self> {
        let mut rows = Vec::with_capacity(env.n_states());
        for s in 0..env.n_states() {
            let a = env.correct(s)?[0];
            let mut tool = vec![0.0; env.tools()];
            tool[a.tool] = ORACLE_MARGIN;
            let mut args = vec![LogitVector::zeros(env.args())?; env.tools()];
            let mut arg = vec![0.0; env.args()];
            arg[a.arg] = ORACLE_MARGIN;
            args[a.tool] = LogitVector::new(arg)?;
            rows.push(PolicyRow {
                tool: LogitVector::new(tool)?,
                args,
            });
        }
        Self::new(rows, 0.0, None)
    }

    pub fn with_learning_rate(mut self, learning_rate: f64) -> Result<Self> {
        Self::new(
            std::mem::take(&mut self.rows),
            learning_rate,
            self.grad_clip,
        )
    }

    pub fn with_grad_clip(mut self, grad_clip: Option<f64>) -> Result<Self> {
        Self::new(
            std::mem::take(&mut self.rows),
            self.learning_rate,
            grad_clip,
        )
    }

    pub fn rows(&self) -> &[PolicyRow] {
        &self.rows
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn grad_clip(&self) -> Option<f64> {
        self.grad_clip
    }

    fn row(&self, state: usize) -> Result<&PolicyRow> {
        self.rows
            .get(state)
            .ok_or_else(|| Error::UnknownState(state.to_string()))
    }

    pub fn tool_logits(&self, state: usize) -> Result<&LogitVector> {
        Ok(&self.row(state)?.tool)
    }

    pub fn arg_logits(&self, state: usize, tool: usize) -> Result<&LogitVector> {
        self.row(state)?
            .args
            .get(tool)
            .ok_or_else(|| Error::validation("tool", format!("{tool} out of range")))
    }

    /// Greedy decode: tool argmax, then arg argmax under that tool. Ties go
    /// to the lowest id.
    pub fn greedy(&self, state: usize) -> Result<Action> {
        let tool = self.tool_logits(state)?.argmax();
        let arg = self.arg_logits(state, tool)?.argmax();
        Ok(Action::new(tool, arg))
    }

    fn check_covers(&self, env: &ToolWorld) -> Result<()> {
        if self.rows.len() != env.n_states() {
            return Err(Error::validation(
                "policy",
                format!("{} rows for {} states", self.rows.len(), env.n_states()),
            ));
        }
        for (s, row) in self.rows.iter().enumerate() {
            if row.tool.vocab_size() != env.tools()
                || row.args.len() != env.tools()
                || row.args.iter().any(|a| a.vocab_size() != env.args())
            {
                return Err(Error::validation(
                    "policy",
                    format!("row {s} does not match the world's vocabulary"),
                ));
            }
        }
        Ok(())
    }

    /// Bit-level fingerprint of all logits.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for row in &self.rows {
            for z in row
                .tool
                .as_slice()
                .iter()
                .chain(row.args.iter().flat_map(|a| a.as_slice()))
            {
                z.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Samples `M` steps from `start`: tool first, then the argument from the
/// head of the sampled tool.
pub fn rollout(
    env: &ToolWorld,
    policy: &StudentPolicy,
    start: usize,
    rng: &mut crate::simplex::RngStream,
) -> Result<Trajectory> {
    policy.check_covers(env)?;
    env.correct(start)?;
    let mut steps = Vec::with_capacity(env.max_steps());
    let mut state = start;
    for _ in 0..env.max_steps() {
        let tool = sample(&softmax(policy.tool_logits(state)?), rng);
        let arg = sample(&softmax(policy.arg_logits(state, tool)?), rng);
        let action = Action::new(tool, arg);
        let observation = env.observe(state, action)?;
        steps.push(Step {
            state,
            action,
            observation,
        });
        state = env.next_state(state, observation);
    }
    Ok(Trajectory { start, steps })
}

/// Fraction of states whose greedy action is accepted.
pub fn task_accuracy(policy: &StudentPolicy, env: &ToolWorld) -> Result<f64> {
    policy.check_covers(env)?;
    let mut hits = 0usize;
    for s in 0..env.n_states() {
        if env.correct(s)?.contains(&policy.greedy(s)?) {
            hits += 1;
        }
    }
    Ok(hits as f64 / env.n_states() as f64)
}

/// States whose greedy action takes its tool from one accepted strategy and
/// its argument from another, and is itself not accepted.
pub fn splice_states(policy: &StudentPolicy, env: &ToolWorld) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for s in 0..env.n_states() {
        let accepted = env.correct(s)?;
        let g = policy.greedy(s)?;
        if accepted.contains(&g) {
            continue;
        }
        let spliced = accepted
            .iter()
            .any(|a| a.tool == g.tool && accepted.iter().any(|b| b != a && b.arg == g.arg));
        if spliced {
            out.push(s);
        }
    }
    Ok(out)
}

/// A teacher's per-position targets along the student's sampled action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceDecodeTarget {
    /// Tool marginal.
    pub tool: Distribution,
    /// Argument distribution conditioned on the student's sampled tool.
    pub arg: Distribution,
}

/// Scores the sampled tool with a joint (tool, arg) distribution. When
/// `eps > 0` both targets are floored with [`floor_and_renormalize`].
pub fn force_decode(
    env: &ToolWorld,
    joint: &Distribution,
    sampled_tool: usize,
    eps: f64,
) -> Result<ForceDecodeTarget> {
    if joint.vocab_size() != env.joint_vocab() {
        return Err(Error::VocabMismatch {
            left: env.joint_vocab(),
            right: joint.vocab_size(),
        });
    }
    if sampled_tool >= env.tools() {
        return Err(Error::validation(
            "tool",
            format!("{sampled_tool} out of range"),
        ));
    }
    let p = joint.probs();
    let marginal: Vec<f64> = (0..env.tools())
        .map(|t| {
            crate::simplex::stable_sum(p[t * env.args()..(t + 1) * env.args()].iter().copied())
        })
        .collect();
    let tool = Distribution::from_weights(&marginal)?;
    let row = &p[sampled_tool * env.args()..(sampled_tool + 1) * env.args()];
    let arg = if row.iter().all(|v| *v == 0.0) {
        Distribution::uniform(env.args())?
    } else {
        Distribution::from_weights(row)?
    };
    if eps > 0.0 {
        Ok(ForceDecodeTarget {
            tool: floor_and_renormalize(&tool, eps)?,
            arg: floor_and_renormalize(&arg, eps)?,
        })
    } else {
        Ok(ForceDecodeTarget { tool, arg })
    }
}

/// Training rejects infinite losses; probes report them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Training,
    Probe,
}

/// One token position of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub step: usize,
    pub token: usize,
    pub loss: f64,
    /// Inf-norm of this position's logit gradient before any reduction
    /// scaling.
    pub grad_inf: f64,
    pub sub_losses: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Per-step loss and its per-position gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    /// Token mean of the weighted divergence.
    pub loss: f64,
    /// Gradient of the token-mean loss w.r.t. the tool logits.
    pub tool_grad: Vec<f64>,
    /// Gradient of the token-mean loss w.r.t. the sampled tool's arg logits.
    pub arg_grad: Vec<f64>,
    pub records: Vec<StepRecord>,
}

/// `(1/|a|) sum_t sum_k w_k D(p_k,t || q_t)` for one step.
///
/// `targets` holds one force-decode target per teacher, already
/// conditioned on the sampled tool. The student side uses the state only.
#[allow(clippy::too_many_arguments)]
pub fn opad_step_loss(
    kind: DivergenceKind,
    targets: &[ForceDecodeTarget],
    weights: &TeacherWeights,
    policy: &StudentPolicy,
    state: usize,
    action: Action,
    mode: LossMode,
    at: (usize, usize),
) -> Result<StepLoss> {
    let (iteration, step) = at;
    let tool_targets: Vec<Distribution> = targets.iter().map(|t| t.tool.clone()).collect();
    let arg_targets: Vec<Distribution> = targets.iter().map(|t| t.arg.clone()).collect();
    let positions = [
        mad_token_loss(kind, &tool_targets, weights, policy.tool_logits(state)?)?,
        mad_token_loss(
            kind,
            &arg_targets,
            weights,
            policy.arg_logits(state, action.tool)?,
        )?,
    ];
    if mode == LossMode::Training {
        if let Some(p) = positions.iter().find(|p| !p.infinite_teachers.is_empty()) {
            return Err(Error::InfiniteLoss {
                teachers: p.infinite_teachers.clone(),
            });
        }
    }
    let records = positions
        .iter()
        .enumerate()
        .map(|(t, p)| StepRecord {
            iteration,
            step,
            token: t,
            loss: p.report.value,
            grad_inf: p.report.inf_norm,
            sub_losses: p.sub_losses.clone(),
            weights: weights.as_slice().to_vec(),
        })
        .collect();
    let [tool, arg] = positions;
    Ok(StepLoss {
        loss: token_mean(tool.report.value, arg.report.value),
        tool_grad: scaled(&tool.report.logit_grad, 1.0 / ACTION_TOKENS as f64),
        arg_grad: scaled(&arg.report.logit_grad, 1.0 / ACTION_TOKENS as f64),
        records,
    })
}

fn token_mean(tool: f64, arg: f64) -> f64 {
    (tool + arg) / ACTION_TOKENS as f64
}

fn scaled(v: &[f64], factor: f64) -> Vec<f64> {
    v.iter().map(|g| g * factor).collect()
}

/// How per-teacher weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// Softmax of post-debate confidences.
    #[default]
    Confidence,
    /// `w_k = 1/K`.
    Uniform,
}

/// How per-step losses combine into the trajectory loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over steps of the per-step token mean.
    #[default]
    SumOfStepMeans,
    /// One mean over every token of the trajectory.
    TokenMean,
}

impl Reduction {
    /// Factor applied to a per-step (token-mean) loss and its gradient.
    fn step_factor(self, steps: usize) -> f64 {
        match self {
            Reduction::SumOfStepMeans => 1.0,
            Reduction::TokenMean => 1.0 / steps as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpadConfig {
    pub kind: DivergenceKind,
    pub rounds: usize,
    pub tau_conf: f64,
    /// Teacher floor for the KL kinds; `0` keeps exact targets.
    pub eps: f64,
    pub learning_rate: f64,
    pub grad_clip: Option<f64>,
    pub iterations: usize,
    pub seed: u64,
    pub weighting: WeightingMode,
    pub reduction: Reduction,
    /// Reuse one debate per visited state within an iteration.
    pub cache_debates: bool,
    pub parallel_debate: bool,
    /// Keep every trajectory and transcript in the artifact.
    pub record_history: bool,
}

impl Default for OpadConfig {
    fn default() -> Self {
        Self {
            kind: DivergenceKind::default(),
            rounds: crate::debate::DEFAULT_ROUNDS,
            tau_conf: crate::weighting::DEFAULT_CONFIDENCE_TEMPERATURE,
            eps: DEFAULT_FLOOR,
            learning_rate: DEFAULT_LEARNING_RATE,
            grad_clip: None,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            weighting: WeightingMode::default(),
            reduction: Reduction::default(),
            cache_debates: true,
            parallel_debate: false,
            record_history: false,
        }
    }
}

impl OpadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::validation("rounds", "must be at least 1"));
        }
        if !(self.tau_conf > 0.0 && self.tau_conf.is_finite()) {
            return Err(Error::validation(
                "tau_conf",
                format!("{} must be positive", self.tau_conf),
            ));
        }
        if !(self.eps >= 0.0 && self.eps < 0.5) {
            return Err(Error::validation(
                "eps",
                format!("{} outside [0, 0.5)", self.eps),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(
                "eta",
                format!("{} must be finite and >= 0", self.learning_rate),
            ));
        }
        Ok(())
    }

    fn debate_settings(&self) -> DebateSettings {
        DebateSettings {
            rounds: self.rounds,
            tau_conf: self.tau_conf,
            parallel: self.parallel_debate,
        }
    }

    /// Floor actually applied to the targets: JSD needs none.
    fn effective_eps(&self) -> f64 {
        match self.kind {
            DivergenceKind::Jsd { .. } => 0.0,
            _ => self.eps,
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub step: usize,
    pub token: usize,
    pub kind: String,
    pub loss: f64,
    pub grad_inf: f64,
    /// Task accuracy after this iteration's update.
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub iteration: usize,
    pub step: usize,
    pub reason: String,
}

/// Everything a training run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub kind: DivergenceKind,
    pub metrics: Vec<MetricRow>,
    /// Per-step token-mean losses in (iteration, step) order.
    pub step_losses: Vec<f64>,
    /// Per-iteration trajectory losses.
    pub trajectory_losses: Vec<f64>,
    /// Per-step max position gradient inf-norm.
    pub grad_series: Vec<f64>,
    pub initial_accuracy: f64,
    /// Task accuracy after each iteration.
    pub accuracy: Vec<f64>,
    pub final_policy: StudentPolicy,
    pub trajectories: Vec<Trajectory>,
    pub transcripts: Vec<Vec<DebateTranscript>>,
    pub abort: Option<AbortRecord>,
}

impl RunArtifact {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy
            .last()
            .copied()
            .unwrap_or(self.initial_accuracy)
    }

    /// `max / median` of the per-step losses.
    pub fn spike_ratio(&self) -> f64 {
        spike_ratio(&self.step_losses)
    }

    pub fn max_grad_inf(&self) -> f64 {
        self.grad_series.iter().copied().fold(0.0, f64::max)
    }
}

/// `max / median`; `+inf` when the median is zero, `NaN` for an empty series.
pub fn spike_ratio(series: &[f64]) -> f64 {
    if series.is_empty() {
        return f64::NAN;
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let max = sorted[n - 1];
    if median == 0.0 {
        f64::INFINITY
    } else {
        max / median
    }
}

/// Debates every step of `trajectory`. With `cache`, a state revisited in
/// the same trajectory reuses its first debate.
pub fn debate_trajectory<T: Teacher>(
    teachers: &[T],
    trajectory: &Trajectory,
    settings: &DebateSettings,
    cache: bool,
) -> Result<Vec<DebateOutcome>> {
    let mut seen: HashMap<usize, DebateOutcome> = HashMap::new();
    let mut out = Vec::with_capacity(trajectory.steps.len());
    for (m, step) in trajectory.steps.iter().enumerate() {
        if cache {
            if let Some(hit) = seen.get(&step.state) {
                out.push(hit.clone());
                continue;
            }
        }
        let state = DebateState::new(step.state, trajectory.debate_label(m));
        let outcome = run_debate(teachers, &state, settings)?;
        if cache {
            seen.insert(step.state, outcome.clone());
        }
        out.push(outcome);
    }
    Ok(out)
}

/// Which logit row a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Tool(usize),
    Arg(usize, usize),
}

/// Gradient over the rows touched by one trajectory.
#[derive(Debug, Default)]
struct SparseGrad {
    rows: BTreeMap<Slot, Vec<f64>>,
}

impl SparseGrad {
    fn add(&mut self, slot: Slot, grad: &[f64], factor: f64) {
        let acc = self
            .rows
            .entry(slot)
            .or_insert_with(|| vec![0.0; grad.len()]);
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += factor * g;
        }
    }

    /// Applies `z -= eta * g` to every touched row, all or nothing.
    fn apply(self, policy: &mut StudentPolicy) -> Result<()> {
        let eta = policy.learning_rate;
        let mut updated: Vec<(Slot, LogitVector)> = Vec::with_capacity(self.rows.len());
        for (slot, mut grad) in self.rows {
            if let Some(clip) = policy.grad_clip {
                let norm = inf_norm(&grad);
                if norm > clip {
                    grad.iter_mut().for_each(|g| *g *= clip / norm);
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::validation(
                    "gradient",
                    format!("non-finite entry in {slot:?}"),
                ));
            }
            let mut row = match slot {
                Slot::Tool(s) => policy.tool_logits(s)?.clone(),
                Slot::Arg(s, t) => policy.arg_logits(s, t)?.clone(),
            };
            row.descend(&grad, eta).map_err(|e| match e {
                Error::Validation { field, reason } => Error::Validation {
                    field,
                    reason: format!("{slot:?} after update: {reason}"),
                },
                other => other,
            })?;
            updated.push((slot, row));
        }
        for (slot, row) in updated {
            match slot {
                Slot::Tool(s) => policy.rows[s].tool = row,
                Slot::Arg(s, t) => policy.rows[s].args[t] = row,
            }
        }
        Ok(())
    }
}

/// Seeded streams for the two random choices of a run.
struct RunStreams {
    start: crate::simplex::RngStream,
    rollout: crate::simplex::RngStream,
}

impl RunStreams {
    fn new(seed: u64) -> Self {
        let seed = RngSeed(seed);
        Self {
            start: seed.stream("opad/start"),
            rollout: seed.stream("opad/rollout"),
        }
    }
}

/// Bookkeeping shared by [`train_from`] and [`train_single_teacher`].
struct Recorder {
    artifact: RunArtifact,
    label: String,
}

impl Recorder {
    fn new(kind: DivergenceKind, policy: &StudentPolicy, env: &ToolWorld) -> Result<Self> {
        Ok(Self {
            label: kind.to_string(),
            artifact: RunArtifact {
                kind,
                metrics: Vec::new(),
                step_losses: Vec::new(),
                trajectory_losses: Vec::new(),
                grad_series: Vec::new(),
                initial_accuracy: task_accuracy(policy, env)?,
                accuracy: Vec::new(),
                final_policy: policy.clone(),
                trajectories: Vec::new(),
                transcripts: Vec::new(),
                abort: None,
            },
        })
    }

    fn step(&mut self, loss: f64, records: &[StepRecord]) {
        self.artifact.step_losses.push(loss);
        self.artifact
            .grad_series
            .push(records.iter().map(|r| r.grad_inf).fold(0.0, f64::max));
        for r in records {
            self.artifact.metrics.push(MetricRow {
                iter: r.iteration,
                step: r.step,
                token: r.token,
                kind: self.label.clone(),
                loss: r.loss,
                grad_inf: r.grad_inf,
                acc: f64::NAN,
            });
        }
    }

    fn close_iteration(&mut self, trajectory_loss: f64, acc: f64) {
        self.artifact.trajectory_losses.push(trajectory_loss);
        self.artifact.accuracy.push(acc);
        self.fill_acc(acc);
    }

    fn fill_acc(&mut self, acc: f64) {
        for row in self.artifact.metrics.iter_mut().rev() {
            if !row.acc.is_nan() {
                break;
            }
            row.acc = acc;
        }
    }

    fn abort(
        mut self,
        policy: StudentPolicy,
        env: &ToolWorld,
        iteration: usize,
        step: usize,
        err: &Error,
    ) -> Result<RunArtifact> {
        log::warn!("training aborted at iteration {iteration}, step {step}: {err}");
        let acc = task_accuracy(&policy, env)?;
        self.fill_acc(acc);
        self.artifact.abort = Some(AbortRecord {
            iteration,
            step,
            reason: err.to_string(),
        });
        self.artifact.final_policy = policy;
        Ok(self.artifact)
    }

    fn finish(mut self, policy: StudentPolicy) -> RunArtifact {
        self.artifact.final_policy = policy;
        self.artifact
    }
}

/// Trains a uniform student.
pub fn train<T: Teacher>(
    env: &ToolWorld,
    teachers: &[T],
    config: &OpadConfig,
) -> Result<RunArtifact> {
    let policy =
        StudentPolicy::uniform(env, config.learning_rate)?.with_grad_clip(config.grad_clip)?;
    train_from(env, teachers, policy, config)
}

/// Runs `config.iterations` iterations of rollout, per-step debate,
/// weighted force-decode loss and one sparse gradient update.
///
/// Configuration problems are errors. A numeric failure mid-run (an
/// infinite loss or logits leaving the valid domain) stops training and
/// returns the partial artifact with [`RunArtifact::abort`] set.
pub fn train_from<T: Teacher>(
    env: &ToolWorld,
    teachers: &[T],
    mut policy: StudentPolicy,
    config: &OpadConfig,
) -> Result<RunArtifact> {
    config.validate()?;
    policy.check_covers(env)?;
    if teachers.is_empty() {
        return Err(Error::validation("teachers", "need at least one teacher"));
    }
    let settings = config.debate_settings();
    let eps = config.effective_eps();
    let factor = config.reduction.step_factor(env.max_steps());
    let mut streams = RunStreams::new(config.seed);
    let mut rec = Recorder::new(config.kind, &policy, env)?;

    for iteration in 0..config.iterations {
        let start = streams.start.below(env.n_states());
        let trajectory = rollout(env, &policy, start, &mut streams.rollout)?;
        let outcomes = debate_trajectory(teachers, &trajectory, &settings, config.cache_debates)?;
        let mut grad = SparseGrad::default();
        let mut trajectory_loss = 0.0;
        for (m, (step, outcome)) in trajectory.steps.iter().zip(&outcomes).enumerate() {
            let weights = match config.weighting {
                WeightingMode::Confidence => confidence_to_weights(&outcome.confidences),
                WeightingMode::Uniform => TeacherWeights::uniform(teachers.len())?,
            };
            let targets = outcome
                .post_debate
                .iter()
                .map(|p| force_decode(env, p, step.action.tool, eps))
                .collect::<Result<Vec<_>>>()?;
            let step_loss = match opad_step_loss(
                config.kind,
                &targets,
                &weights,
                &policy,
                step.state,
                step.action,
                LossMode::Training,
                (iteration, m),
            ) {
                Ok(l) => l,
                Err(e @ Error::InfiniteLoss { .. }) => {
                    return rec.abort(policy, env, iteration, m, &e)
                }
                Err(e) => return Err(e),
            };
            rec.step(step_loss.loss, &step_loss.records);
            trajectory_loss += factor * step_loss.loss;
            grad.add(Slot::Tool(step.state), &step_loss.tool_grad, factor);
            grad.add(
                Slot::Arg(step.state, step.action.tool),
                &step_loss.arg_grad,
                factor,
            );
        }
        if let Err(e) = grad.apply(&mut policy) {
            let last = env.max_steps() - 1;
            return rec.abort(policy, env, iteration, last, &e);
        }
        rec.close_iteration(trajectory_loss, task_accuracy(&policy, env)?);
        if config.record_history {
            rec.artifact
                .transcripts
                .push(outcomes.into_iter().map(|o| o.transcript).collect());
            rec.artifact.trajectories.push(trajectory);
        }
    }
    Ok(rec.finish(policy))
}

/// Plain single-teacher on-policy distillation: no debate, no weighting,
/// the teacher's own answer as target. Shares the rollout and update rules
/// with [`train_from`] so the two can be compared bit for bit.
pub fn train_single_teacher<T: Teacher>(
    env: &ToolWorld,
    teacher: &T,
    config: &OpadConfig,
) -> Result<RunArtifact> {
    config.validate()?;
    let mut policy =
        StudentPolicy::uniform(env, config.learning_rate)?.with_grad_clip(config.grad_clip)?;
    let eps = config.effective_eps();
    let factor = config.reduction.step_factor(env.max_steps());
    let mut streams = RunStreams::new(config.seed);
    let mut rec = Recorder::new(config.kind, &policy, env)?;

    for iteration in 0..config.iterations {
        let start = streams.start.below(env.n_states());
        let trajectory = rollout(env, &policy, start, &mut streams.rollout)?;
        let mut grad = SparseGrad::default();
        let mut trajectory_loss = 0.0;
        for (m, step) in trajectory.steps.iter().enumerate() {
            let state = DebateState::new(step.state, trajectory.debate_label(m));
            let answer = teacher.respond(&state, &[])?.distribution;
            let target = force_decode(env, &answer, step.action.tool, eps)?;
            let tool = logit_gradient(config.kind, &target.tool, policy.tool_logits(step.state)?)?;
            let arg = logit_gradient(
                config.kind,
                &target.arg,
                policy.arg_logits(step.state, step.action.tool)?,
            )?;
            if !tool.is_finite() || !arg.is_finite() {
                let e = Error::InfiniteLoss { teachers: vec![0] };
                return rec.abort(policy, env, iteration, m, &e);
            }
            let loss = token_mean(tool.value, arg.value);
            let records: Vec<StepRecord> = [&tool, &arg]
                .iter()
                .enumerate()
                .map(|(t, r)| StepRecord {
                    iteration,
                    step: m,
                    token: t,
                    loss: r.value,
                    grad_inf: r.inf_norm,
                    sub_losses: vec![r.value],
                    weights: vec![1.0],
                })
                .collect();
            rec.step(loss, &records);
            trajectory_loss += factor * loss;
            let half = 1.0 / ACTION_TOKENS as f64;
            grad.add(
                Slot::Tool(step.state),
                &scaled(&tool.logit_grad, half),
                factor,
            );
            grad.add(
                Slot::Arg(step.state, step.action.tool),
                &scaled(&arg.logit_grad, half),
                factor,
            );
        }
        if let Err(e) = grad.apply(&mut policy) {
            let last = env.max_steps() - 1;
            return rec.abort(policy, env, iteration, last, &e);
        }
        rec.close_iteration(trajectory_loss, task_accuracy(&policy, env)?);
        if config.record_history {
            rec.artifact.trajectories.push(trajectory);
        }
    }
    Ok(rec.finish(policy))
}

/// A world plus the mock teachers that know it.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub env: ToolWorld,
    pub teachers: Vec<MockTeacher>,
}

impl Fixture {
    /// Best standalone (no debate) teacher accuracy.
    pub fn best_teacher_accuracy(&self) -> f64 {
        let answers = self.env.primary_joint_answers();
        self.teachers
            .iter()
            .map(|t| t.standalone_accuracy(&answers))
            .fold(0.0, f64::max)
    }

    pub fn teacher_fingerprints(&self) -> Vec<u64> {
        self.teachers.iter().map(MockTeacher::fingerprint).collect()
    }
}

pub const FIXTURE_STATES: usize = 10;
pub const FIXTURE_TOOLS: usize = 4;
pub const FIXTURE_ARGS: usize = 4;

/// Correct action of fixture state `s`.
pub fn fixture_answer(s: usize) -> Action {
    Action::new(s % FIXTURE_TOOLS, (3 * s + 1) % FIXTURE_ARGS)
}

/// A wrong action that differs from the answer in both tokens.
fn fixture_decoy(s: usize) -> Action {
    let a = fixture_answer(s);
    Action::new((a.tool + 1) % FIXTURE_TOOLS, (a.arg + 2) % FIXTURE_ARGS)
}

fn fixture_world(correct: Vec<Vec<Action>>) -> Result<ToolWorld> {
    ToolWorld::new(
        FIXTURE_TOOLS,
        FIXTURE_ARGS,
        correct,
        Transition::Cyclic,
        DEFAULT_MAX_STEPS,
    )
}

/// Two teachers over 10 states: Expert A is competent (0.9 on the answer)
/// on states 0-4, Expert B on states 5-9. Elsewhere each puts 0.3 on a
/// decoy and is flat otherwise.
pub fn complementary_fixture(revision_rate: f64) -> Result<Fixture> {
    complementary_fixture_with(2, revision_rate)
}

/// `k` teachers, each competent on one contiguous block of the 10 states
/// (block sizes differ by at most one), with the same peaks as
/// [`complementary_fixture`].
pub fn complementary_fixture_with(k: usize, revision_rate: f64) -> Result<Fixture> {
    if k == 0 || k > FIXTURE_STATES {
        return Err(Error::validation(
            "teachers",
            format!("{k} outside 1..={FIXTURE_STATES}"),
        ));
    }
    let answers: Vec<Action> = (0..FIXTURE_STATES).map(fixture_answer).collect();
    let env = fixture_world(answers.iter().map(|a| vec![*a]).collect())?;
    let correct: Vec<usize> = answers.iter().map(|a| env.joint_id(*a)).collect();
    let wrong: Vec<usize> = (0..FIXTURE_STATES)
        .map(|s| env.joint_id(fixture_decoy(s)))
        .collect();
    let teachers = (0..k)
        .map(|j| {
            let block = (j * FIXTURE_STATES / k)..((j + 1) * FIXTURE_STATES / k);
            let spec = MockTeacherSpec::complementary(
                &correct,
                &wrong,
                block.collect(),
                vec![FIXTURE_TOOLS, FIXTURE_ARGS],
                0.9,
                0.3,
                1.0,
                revision_rate,
            )?;
            MockTeacher::new(TeacherId::new(j + 1)?, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fixture { env, teachers })
}

/// `k` teachers that all put `1 - 1e-6` on the answer in every state: the
/// transcript-conditioned targets are far sharper than a uniform student.
pub fn privileged_gap_fixture(k: usize) -> Result<Fixture> {
    let answers: Vec<Action> = (0..FIXTURE_STATES).map(fixture_answer).collect();
    let env = fixture_world(answers.iter().map(|a| vec![*a]).collect())?;
    let correct: Vec<usize> = answers.iter().map(|a| env.joint_id(*a)).collect();
    let wrong: Vec<usize> = (0..FIXTURE_STATES)
        .map(|s| env.joint_id(fixture_decoy(s)))
        .collect();
    let peak = 1.0 - 1e-6;
    let teachers = (1..=k)
        .map(|index| {
            let spec = MockTeacherSpec::complementary(
                &correct,
                &wrong,
                (0..FIXTURE_STATES).collect(),
                vec![FIXTURE_TOOLS, FIXTURE_ARGS],
                peak,
                0.3,
                1.0,
                crate::debate::DEFAULT_REVISION_RATE,
            )?;
            MockTeacher::new(TeacherId::new(index)?, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fixture { env, teachers })
}

/// Two accepted strategies per state, `(t, a)` and `(t + 2, a + 2)`.
///
/// Expert A backs the first strategy: its tool head is sure (0.9) but its
/// argument schema is loose (0.55). Expert B backs the second with the
/// opposite profile (tool 0.6, argument 0.95). Both joints are products of
/// a tool and an argument distribution, so each teacher's argument
/// preference does not depend on the tool it is asked about. No revision.
pub fn two_strategy_fixture() -> Result<Fixture> {
    let first: Vec<Action> = (0..FIXTURE_STATES).map(fixture_answer).collect();
    let second: Vec<Action> = first
        .iter()
        .map(|a| Action::new((a.tool + 2) % FIXTURE_TOOLS, (a.arg + 2) % FIXTURE_ARGS))
        .collect();
    let env = fixture_world(
        first
            .iter()
            .zip(&second)
            .map(|(a, b)| vec![*a, *b])
            .collect(),
    )?;
    let product =
        |strategy: &[Action], tool_peak: f64, arg_peak: f64| -> Result<Vec<Distribution>> {
            strategy
                .iter()
                .map(|a| {
                    let peaked = |id: usize, n: usize, mass: f64| {
                        (0..n)
                            .map(|i| {
                                if i == id {
                                    mass
                                } else {
                                    (1.0 - mass) / (n - 1) as f64
                                }
                            })
                            .collect::<Vec<f64>>()
                    };
                    let f = peaked(a.tool, FIXTURE_TOOLS, tool_peak);
                    let g = peaked(a.arg, FIXTURE_ARGS, arg_peak);
                    let joint: Vec<f64> = f
                        .iter()
                        .flat_map(|ft| g.iter().map(move |ga| ft * ga))
                        .collect();
                    Distribution::from_weights(&joint)
                })
                .collect()
        };
    let tables = [product(&first, 0.9, 0.55)?, product(&second, 0.6, 0.95)?];
    let teachers = tables
        .into_iter()
        .enumerate()
        .map(|(k, base_table)| {
            // Rows that peak above one half count as competent.
            let competence: BTreeSet<usize> = (0..FIXTURE_STATES)
                .filter(|s| base_table[*s].max_prob() > 0.5)
                .collect();
            let peak_mass = competence
                .iter()
                .map(|s| base_table[*s].max_prob())
                .fold(0.9_f64, f64::min);
            let spec = MockTeacherSpec {
                base_table,
                competence,
                peak_mass,
                flat_temperature: 1.0,
                revision_rate: 0.0,
                action_shape: vec![FIXTURE_TOOLS, FIXTURE_ARGS],
            };
            MockTeacher::new(TeacherId::new(k + 1)?, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fixture { env, teachers })
}

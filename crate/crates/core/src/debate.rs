//! Multi-round teacher debate.
//!
//! In round 1 every teacher answers independently. In round `r > 1` each
//! teacher revises after reading every teacher's round `r - 1` response.
//! The resulting K x R transcript is privileged context: it conditions the
//! teachers' force-decode distributions and is never shown to the student.
//!
//! [`MockTeacher`] is a deterministic stand-in for an LLM teacher. Its
//! revision rule is a geometric pool of its own base distribution with all
//! previous-round posts, which reproduces selective adoption of a more
//! certain peer's answer.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{stable_sum, Distribution};
use crate::weighting::{ConfidenceScores, TeacherWeights};

pub const DEFAULT_ROUNDS: usize = 2;
pub const DEFAULT_TEACHERS: usize = 2;
pub const DEFAULT_REVISION_RATE: f64 = 0.5;

/// Teacher identity. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TeacherId {
    pub index: usize,
    pub name: String,
}

impl TeacherId {
    /// Teacher `index` named "Expert A", "Expert B", ...
    pub fn new(index: usize) -> Result<Self> {
        let letter = expert_letter(index)?;
        Ok(Self {
            index,
            name: format!("Expert {letter}"),
        })
    }
}

fn expert_letter(index: usize) -> Result<char> {
    if !(1..=26).contains(&index) {
        return Err(Error::validation(
            "teacher",
            format!("index {index} outside 1..=26"),
        ));
    }
    Ok((b'A' + (index - 1) as u8) as char)
}

/// One teacher's response in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub teacher: TeacherId,
    pub round: usize,
    pub content: Vec<usize>,
    pub confidence: f64,
}

/// Complete K x R grid of utterances for one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateTranscript {
    state_ref: String,
    /// `rounds[r][k]` is teacher `k + 1` in round `r + 1`.
    rounds: Vec<Vec<Utterance>>,
}

impl DebateTranscript {
    pub fn new(state_ref: impl Into<String>, rounds: Vec<Vec<Utterance>>) -> Result<Self> {
        if rounds.is_empty() || rounds[0].is_empty() {
            return Err(Error::validation(
                "transcript",
                "need at least one round and one teacher",
            ));
        }
        let k = rounds[0].len();
        for (r, row) in rounds.iter().enumerate() {
            if row.len() != k {
                return Err(Error::validation(
                    "transcript",
                    format!("round {} has {} cells, expected {k}", r + 1, row.len()),
                ));
            }
            for (j, u) in row.iter().enumerate() {
                if u.round != r + 1 || u.teacher.index != j + 1 {
                    return Err(Error::validation(
                        "transcript",
                        format!(
                            "cell ({}, {}) holds teacher {} round {}",
                            j + 1,
                            r + 1,
                            u.teacher.index,
                            u.round
                        ),
                    ));
                }
                if u.content.is_empty() {
                    return Err(Error::validation(
                        "transcript",
                        "utterance content is empty",
                    ));
                }
                if !(0.0..=100.0).contains(&u.confidence) {
                    return Err(Error::validation(
                        "transcript",
                        format!("confidence {} outside [0, 100]", u.confidence),
                    ));
                }
            }
        }
        Ok(Self {
            state_ref: state_ref.into(),
            rounds,
        })
    }

    pub fn state_ref(&self) -> &str {
        &self.state_ref
    }

    pub fn num_teachers(&self) -> usize {
        self.rounds[0].len()
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn rounds(&self) -> &[Vec<Utterance>] {
        &self.rounds
    }

    /// Utterance of teacher `k` (1-based) in round `r` (1-based).
    pub fn cell(&self, k: usize, r: usize) -> Option<&Utterance> {
        self.rounds.get(r.checked_sub(1)?)?.get(k.checked_sub(1)?)
    }

    pub fn final_confidences(&self) -> Vec<f64> {
        self.rounds
            .last()
            .expect("non-empty")
            .iter()
            .map(|u| u.confidence)
            .collect()
    }

    /// Bracketed text block: `[Debate Start]`, one line per cell in round
    /// order, `[Debate End]`.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::from("[Debate Start]\n");
        for row in &self.rounds {
            for u in row {
                let letter = expert_letter(u.teacher.index)?;
                let phase = if u.round == 1 { "Initial" } else { "Revised" };
                let tokens: Vec<String> = u.content.iter().map(|t| t.to_string()).collect();
                writeln!(
                    out,
                    "[Expert {letter} {phase} Answer]: {} Confidence Score: {}",
                    tokens.join(" "),
                    u.confidence
                )
                .expect("writing to a String");
            }
        }
        out.push_str("[Debate End]\n");
        Ok(out)
    }

    /// Inverse of [`DebateTranscript::to_text`].
    pub fn parse(text: &str, state_ref: impl Into<String>) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let start = lines
            .iter()
            .position(|l| *l == "[Debate Start]")
            .ok_or_else(|| missing("[Debate Start]"))?;
        let end = lines
            .iter()
            .position(|l| *l == "[Debate End]")
            .ok_or_else(|| missing("[Debate End]"))?;
        if end < start {
            return Err(Error::MalformedTranscript {
                line: end + 1,
                reason: "[Debate End] precedes [Debate Start]".into(),
            });
        }

        let mut cells: Vec<(usize, bool, Vec<usize>, f64)> = Vec::new();
        for (offset, line) in lines[start + 1..end].iter().enumerate() {
            let line_no = start + offset + 2;
            cells.push(parse_cell(line, line_no)?);
        }

        // Round 1 is the run of Initial answers; every later row is K Revised answers.
        let k = cells.iter().take_while(|c| c.1).count();
        if k == 0 {
            return Err(missing("[Expert A Initial Answer]"));
        }
        let mut rounds: Vec<Vec<Utterance>> = Vec::new();
        for (i, (teacher, initial, content, confidence)) in cells.into_iter().enumerate() {
            let r = i / k + 1;
            let expected = i % k + 1;
            if teacher != expected || initial != (r == 1) {
                let phase = if r == 1 { "Initial" } else { "Revised" };
                return Err(missing(&format!(
                    "[Expert {} {phase} Answer]",
                    expert_letter(expected)?
                )));
            }
            if r > rounds.len() {
                rounds.push(Vec::with_capacity(k));
            }
            rounds[r - 1].push(Utterance {
                teacher: TeacherId::new(teacher)?,
                round: r,
                content,
                confidence,
            });
        }
        if let Some(last) = rounds.last() {
            if last.len() != k {
                let next = last.len() + 1;
                return Err(missing(&format!(
                    "[Expert {} Revised Answer]",
                    expert_letter(next)?
                )));
            }
        }
        Self::new(state_ref, rounds)
    }

    /// One JSON object per utterance, round-major.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for u in self.rounds.iter().flatten() {
            let line = serde_json::json!({
                "state": self.state_ref,
                "teacher": u.teacher.index,
                "name": u.teacher.name,
                "round": u.round,
                "content": u.content,
                "confidence": u.confidence,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn missing(marker: &str) -> Error {
    Error::MissingMarker {
        marker: marker.to_string(),
    }
}

fn parse_cell(line: &str, line_no: usize) -> Result<(usize, bool, Vec<usize>, f64)> {
    let malformed = |reason: &str| Error::MalformedTranscript {
        line: line_no,
        reason: reason.to_string(),
    };
    let rest = line
        .strip_prefix("[Expert ")
        .ok_or_else(|| malformed("expected an `[Expert X ... Answer]:` marker"))?;
    let mut chars = rest.chars();
    let letter = chars
        .next()
        .ok_or_else(|| malformed("missing expert letter"))?;
    if !letter.is_ascii_uppercase() {
        return Err(malformed("expert letter must be A-Z"));
    }
    let teacher = (letter as u8 - b'A') as usize + 1;
    let rest = chars.as_str();
    let (initial, rest) = if let Some(r) = rest.strip_prefix(" Initial Answer]:") {
        (true, r)
    } else if let Some(r) = rest.strip_prefix(" Revised Answer]:") {
        (false, r)
    } else {
        return Err(malformed(
            "expected `Initial Answer]:` or `Revised Answer]:`",
        ));
    };
    let (answer, score) = rest
        .split_once("Confidence Score:")
        .ok_or_else(|| missing("Confidence Score:"))?;
    let content = answer
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| malformed("content tokens must be ids"))
        })
        .collect::<Result<Vec<_>>>()?;
    if content.is_empty() {
        return Err(malformed("empty answer"));
    }
    let confidence: f64 = score
        .trim()
        .parse()
        .map_err(|_| malformed("confidence score is not a number"))?;
    Ok((teacher, initial, content, confidence))
}

/// What a teacher debates about: a lookup key plus a printable reference
/// (for example the state and the observations so far).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DebateState {
    pub key: usize,
    pub label: String,
}

impl DebateState {
    pub fn new(key: usize, label: impl Into<String>) -> Self {
        Self {
            key,
            label: label.into(),
        }
    }
}

/// A teacher's round response: the utterance plus the distribution over
/// action tokens it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub utterance: Utterance,
    pub distribution: Distribution,
}

/// Anything that can take part in a debate.
pub trait Teacher: Send + Sync {
    fn id(&self) -> &TeacherId;

    /// Answer for round `prior.len() + 1`, having read all earlier rounds.
    fn respond(&self, state: &DebateState, prior: &[Vec<Response>]) -> Result<Response>;
}

impl<T: Teacher + ?Sized> Teacher for Box<T> {
    fn id(&self) -> &TeacherId {
        (**self).id()
    }

    fn respond(&self, state: &DebateState, prior: &[Vec<Response>]) -> Result<Response> {
        (**self).respond(state, prior)
    }
}

/// Parameters of a deterministic mock teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTeacherSpec {
    /// Per-state distribution over (joint) action tokens.
    pub base_table: Vec<Distribution>,
    pub competence: BTreeSet<usize>,
    pub peak_mass: f64,
    pub flat_temperature: f64,
    /// Revision rate lambda in `[0, 1]`.
    pub revision_rate: f64,
    /// Mixed-radix shape of an action token: `[tools, args]` decodes joint
    /// id `t * args + a` into content `[t, a]`.
    pub action_shape: Vec<usize>,
}

impl MockTeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_table.is_empty() {
            return Err(Error::validation("base_table", "no states"));
        }
        let vocab = self.base_table[0].vocab_size();
        if self.base_table.iter().any(|d| d.vocab_size() != vocab) {
            return Err(Error::validation(
                "base_table",
                "rows differ in vocabulary size",
            ));
        }
        if self.action_shape.iter().product::<usize>() != vocab || self.action_shape.is_empty() {
            return Err(Error::validation(
                "action_shape",
                format!("{:?} does not factor vocabulary {vocab}", self.action_shape),
            ));
        }
        if !(self.peak_mass > 0.5 && self.peak_mass < 1.0) {
            return Err(Error::validation(
                "peak_mass",
                format!("{} outside (0.5, 1)", self.peak_mass),
            ));
        }
        if !(self.flat_temperature >= 1.0 && self.flat_temperature.is_finite()) {
            return Err(Error::validation(
                "flat_temperature",
                format!("{} must be >= 1", self.flat_temperature),
            ));
        }
        if !(0.0..=1.0).contains(&self.revision_rate) {
            return Err(Error::validation(
                "revision_rate",
                format!("{} outside [0, 1]", self.revision_rate),
            ));
        }
        for (s, row) in self.base_table.iter().enumerate() {
            let top = row.max_prob();
            if self.competence.contains(&s) {
                if top < self.peak_mass - 1e-12 {
                    return Err(Error::validation(
                        "base_table",
                        format!("competent state {s} peaks at {top} < {}", self.peak_mass),
                    ));
                }
            } else if top > 0.5 + 1e-12 {
                return Err(Error::validation(
                    "base_table",
                    format!("incompetent state {s} peaks at {top} > 0.5"),
                ));
            }
        }
        if let Some(s) = self
            .competence
            .iter()
            .find(|s| **s >= self.base_table.len())
        {
            return Err(Error::validation(
                "competence",
                format!("state {s} out of range"),
            ));
        }
        Ok(())
    }

    /// Complementary-competence teacher over `vocab` action tokens.
    ///
    /// On competent states the row puts `peak_mass` on `correct[s]` and
    /// spreads the rest evenly. On other states it puts `wrong_peak` on
    /// `wrong[s]`, spreads the rest evenly, then flattens with
    /// `p^(1/flat_temperature)`.
    #[allow(clippy::too_many_arguments)]
    pub fn complementary(
        correct: &[usize],
        wrong: &[usize],
        competence: BTreeSet<usize>,
        action_shape: Vec<usize>,
        peak_mass: f64,
        wrong_peak: f64,
        flat_temperature: f64,
        revision_rate: f64,
    ) -> Result<Self> {
        let vocab: usize = action_shape.iter().product();
        if correct.len() != wrong.len() {
            return Err(Error::validation(
                "wrong",
                "one wrong action per state required",
            ));
        }
        let peaked = |id: usize, mass: f64| -> Result<Vec<f64>> {
            if id >= vocab {
                return Err(Error::validation(
                    "action",
                    format!("{id} outside vocabulary {vocab}"),
                ));
            }
            let rest = (1.0 - mass) / (vocab - 1) as f64;
            let mut row = vec![rest; vocab];
            row[id] = mass;
            Ok(row)
        };
        let mut base_table = Vec::with_capacity(correct.len());
        for s in 0..correct.len() {
            let row = if competence.contains(&s) {
                Distribution::new(peaked(correct[s], peak_mass)?)?
            } else {
                if wrong[s] == correct[s] {
                    return Err(Error::validation(
                        "wrong",
                        format!("state {s}: wrong equals correct"),
                    ));
                }
                let raw = peaked(wrong[s], wrong_peak)?;
                let flat: Vec<f64> = raw.iter().map(|v| v.powf(1.0 / flat_temperature)).collect();
                Distribution::from_weights(&flat)?
            };
            base_table.push(row);
        }
        let spec = Self {
            base_table,
            competence,
            peak_mass,
            flat_temperature,
            revision_rate,
            action_shape,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockTeacher {
    id: TeacherId,
    spec: MockTeacherSpec,
}

impl MockTeacher {
    pub fn new(id: TeacherId, spec: MockTeacherSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { id, spec })
    }

    pub fn spec(&self) -> &MockTeacherSpec {
        &self.spec
    }

    pub fn base(&self, key: usize) -> Result<&Distribution> {
        self.spec
            .base_table
            .get(key)
            .ok_or_else(|| Error::UnknownState(key.to_string()))
    }

    /// Decodes a joint token id into per-position tokens.
    pub fn decode(&self, mut id: usize) -> Vec<usize> {
        let mut digits = vec![0; self.spec.action_shape.len()];
        for (slot, radix) in digits.iter_mut().zip(&self.spec.action_shape).rev() {
            *slot = id % radix;
            id /= radix;
        }
        digits
    }

    /// Fraction of states whose base-table argmax is `correct[s]`.
    pub fn standalone_accuracy(&self, correct: &[usize]) -> f64 {
        let hits = self
            .spec
            .base_table
            .iter()
            .zip(correct)
            .filter(|(row, c)| row.argmax() == **c)
            .count();
        hits as f64 / correct.len() as f64
    }

    /// Order-independent fingerprint of the teacher's tables.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for row in &self.spec.base_table {
            for p in row.probs() {
                p.to_bits().hash(&mut h);
            }
        }
        self.spec.revision_rate.to_bits().hash(&mut h);
        h.finish()
    }

    fn pool(&self, base: &Distribution, previous: &[Response]) -> Result<Distribution> {
        let lambda = self.spec.revision_rate;
        let k = previous.len() as f64;
        let vocab = base.vocab_size();
        let mut logw = Vec::with_capacity(vocab);
        for v in 0..vocab {
            let own = ln0(base.get(v));
            let peers: Vec<f64> = previous
                .iter()
                .map(|r| ln0(r.distribution.get(v)))
                .collect();
            let peer_sum = if peers.contains(&f64::NEG_INFINITY) {
                f64::NEG_INFINITY
            } else {
                stable_sum(peers)
            };
            let mut acc = 0.0;
            if lambda < 1.0 {
                acc += (1.0 - lambda) * own;
            }
            if lambda > 0.0 {
                acc += lambda / k * peer_sum;
            }
            logw.push(acc);
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            // Pool has empty support; keep the teacher's own answer.
            return Ok(base.clone());
        }
        let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        Distribution::from_weights(&w)
    }
}

fn ln0(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl Teacher for MockTeacher {
    fn id(&self) -> &TeacherId {
        &self.id
    }

    fn respond(&self, state: &DebateState, prior: &[Vec<Response>]) -> Result<Response> {
        let base = self.base(state.key)?;
        if base.vocab_size() != self.spec.action_shape.iter().product::<usize>() {
            return Err(Error::validation("action_shape", "does not match table"));
        }
        let round = prior.len() + 1;
        let distribution = match prior.last() {
            None => base.clone(),
            Some(previous) => {
                if previous
                    .iter()
                    .any(|r| r.distribution.vocab_size() != base.vocab_size())
                {
                    return Err(Error::VocabMismatch {
                        left: base.vocab_size(),
                        right: previous[0].distribution.vocab_size(),
                    });
                }
                if self.spec.revision_rate == 0.0 {
                    base.clone()
                } else {
                    self.pool(base, previous)?
                }
            }
        };
        let utterance = Utterance {
            teacher: self.id.clone(),
            round,
            content: self.decode(distribution.argmax()),
            confidence: round2(100.0 * distribution.max_prob()),
        };
        Ok(Response {
            utterance,
            distribution,
        })
    }
}

/// Result of a full debate.
#[derive(Debug, Clone, PartialEq)]
pub struct DebateOutcome {
    pub transcript: DebateTranscript,
    /// Each teacher's final-round distribution: the force-decode target.
    pub post_debate: Vec<Distribution>,
    /// Final-round confidences.
    pub confidences: ConfidenceScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DebateSettings {
    pub rounds: usize,
    pub tau_conf: f64,
    /// Query the K teachers of a round on separate threads.
    pub parallel: bool,
}

impl Default for DebateSettings {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            tau_conf: crate::weighting::DEFAULT_CONFIDENCE_TEMPERATURE,
            parallel: false,
        }
    }
}

/// Runs `settings.rounds` rounds. Rounds are a barrier; within a round the
/// teachers are independent and cells are keyed by teacher index, so the
/// transcript does not depend on completion order.
pub fn run_debate<T: Teacher>(
    teachers: &[T],
    state: &DebateState,
    settings: &DebateSettings,
) -> Result<DebateOutcome> {
    if teachers.is_empty() {
        return Err(Error::validation("teachers", "need at least one teacher"));
    }
    if settings.rounds == 0 {
        return Err(Error::validation("rounds", "need at least one round"));
    }
    for (j, t) in teachers.iter().enumerate() {
        if t.id().index != j + 1 {
            return Err(Error::validation(
                "teachers",
                format!("teacher at position {j} has index {}", t.id().index),
            ));
        }
    }
    let mut history: Vec<Vec<Response>> = Vec::with_capacity(settings.rounds);
    for _ in 0..settings.rounds {
        let row: Vec<Response> = if settings.parallel && teachers.len() > 1 {
            std::thread::scope(|scope| {
                let handles: Vec<_> = teachers
                    .iter()
                    .map(|t| {
                        let prior = &history;
                        scope.spawn(move || t.respond(state, prior))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("teacher thread panicked"))
                    .collect::<Result<Vec<_>>>()
            })?
        } else {
            teachers
                .iter()
                .map(|t| t.respond(state, &history))
                .collect::<Result<Vec<_>>>()?
        };
        history.push(row);
    }
    let grid: Vec<Vec<Utterance>> = history
        .iter()
        .map(|row| row.iter().map(|r| r.utterance.clone()).collect())
        .collect();
    let transcript = DebateTranscript::new(state.label.clone(), grid)?;
    let last = history.pop().expect("at least one round");
    let (confidences, clamped) = ConfidenceScores::clamped(
        last.iter().map(|r| r.utterance.confidence).collect(),
        settings.tau_conf,
    )?;
    if !clamped.is_empty() {
        log::warn!(
            "state {}: clamped confidences for teachers {clamped:?}",
            state.label
        );
    }
    Ok(DebateOutcome {
        transcript,
        post_debate: last.into_iter().map(|r| r.distribution).collect(),
        confidences,
    })
}

/// Weighted mixture `sum_k w_k p_k` of post-debate distributions.
pub fn consensus(post: &[Distribution], weights: &TeacherWeights) -> Result<Distribution> {
    if post.is_empty() || post.len() != weights.len() {
        return Err(Error::validation(
            "weights",
            "one weight per teacher required",
        ));
    }
    let vocab = post[0].vocab_size();
    let mut mix = vec![0.0; vocab];
    for (p, w) in post.iter().zip(weights.as_slice()) {
        if p.vocab_size() != vocab {
            return Err(Error::VocabMismatch {
                left: vocab,
                right: p.vocab_size(),
            });
        }
        for (m, v) in mix.iter_mut().zip(p.probs()) {
            *m += w * v;
        }
    }
    Distribution::from_weights(&mix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weighting::confidence_to_weights;
    use proptest::prelude::*;

    fn teacher(
        index: usize,
        rows: Vec<Vec<f64>>,
        competence: &[usize],
        lambda: f64,
    ) -> MockTeacher {
        let vocab = rows[0].len();
        let spec = MockTeacherSpec {
            base_table: rows
                .into_iter()
                .map(|r| Distribution::new(r).unwrap())
                .collect(),
            competence: competence.iter().copied().collect(),
            peak_mass: 0.9,
            flat_temperature: 1.0,
            revision_rate: lambda,
            action_shape: vec![vocab],
        };
        MockTeacher::new(TeacherId::new(index).unwrap(), spec).unwrap()
    }

    fn settings(rounds: usize) -> DebateSettings {
        DebateSettings {
            rounds,
            ..DebateSettings::default()
        }
    }

    // Correct action 0. A: peaked 0.9 on it. B: flat with 0.3 on action 1.
    fn complementary_pair(lambda: f64) -> Vec<MockTeacher> {
        let a = vec![0.9, 0.1 / 3.0, 0.1 / 3.0, 0.1 / 3.0];
        let b = vec![0.7 / 3.0, 0.3, 0.7 / 3.0, 0.7 / 3.0];
        vec![
            teacher(1, vec![a], &[0], lambda),
            teacher(2, vec![b], &[], lambda),
        ]
    }

    /// Independent oracle: unnormalized geometric pool evaluated entrywise.
    fn pool_oracle(base: &[f64], prev: &[&[f64]], lambda: f64) -> Vec<f64> {
        let k = prev.len() as f64;
        let raw: Vec<f64> = (0..base.len())
            .map(|v| {
                let peers: f64 = prev.iter().map(|p| p[v]).product();
                base[v].powf(1.0 - lambda) * peers.powf(lambda / k)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    }

    #[test]
    fn incompetent_teacher_adopts_correct_action() {
        let teachers = complementary_pair(0.5);
        let state = DebateState::new(0, "s0");
        let out = run_debate(&teachers, &state, &settings(2)).unwrap();
        let a = teachers[0].base(0).unwrap().probs().to_vec();
        let b = teachers[1].base(0).unwrap().probs().to_vec();
        let expected = pool_oracle(&b, &[&a, &b], 0.5);
        for (x, y) in out.post_debate[1].probs().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(teachers[1].base(0).unwrap().argmax(), 1);
        assert_eq!(out.post_debate[1].argmax(), 0);
        assert_eq!(out.transcript.cell(2, 2).unwrap().content, vec![0]);
    }

    #[test]
    fn zero_revision_rate_is_identity() {
        let teachers = complementary_pair(0.0);
        let state = DebateState::new(0, "s0");
        let one = run_debate(&teachers, &state, &settings(1)).unwrap();
        for rounds in 2..5 {
            let many = run_debate(&teachers, &state, &settings(rounds)).unwrap();
            assert_eq!(many.post_debate, one.post_debate);
            assert_eq!(many.confidences, one.confidences);
            for r in 1..=rounds {
                for k in 1..=2 {
                    let u = many.transcript.cell(k, r).unwrap();
                    let u1 = one.transcript.cell(k, 1).unwrap();
                    assert_eq!((&u.content, u.confidence), (&u1.content, u1.confidence));
                }
            }
        }
    }

    #[test]
    fn single_teacher_debate_keeps_base() {
        let t = vec![teacher(1, vec![vec![0.2, 0.5, 0.3]], &[], 0.5)];
        let state = DebateState::new(0, "s0");
        let out = run_debate(&t, &state, &settings(3)).unwrap();
        assert_eq!(out.transcript.num_teachers(), 1);
        assert_eq!(out.transcript.num_rounds(), 3);
        for (a, b) in out.post_debate[0]
            .probs()
            .iter()
            .zip(t[0].base(0).unwrap().probs())
        {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_field_errors_cancel() {
        // Fields (f1, f2) each in {right = 0, wrong = 1}; joint id = 2 * f1 + f2.
        let product = |f1: [f64; 2], f2: [f64; 2]| -> Vec<f64> {
            vec![f1[0] * f2[0], f1[0] * f2[1], f1[1] * f2[0], f1[1] * f2[1]]
        };
        let a = product([0.47, 0.53], [0.94, 0.06]);
        let b = product([0.94, 0.06], [0.47, 0.53]);
        let mk = |i: usize, row: Vec<f64>| {
            let spec = MockTeacherSpec {
                base_table: vec![Distribution::new(row).unwrap()],
                competence: BTreeSet::new(),
                peak_mass: 0.9,
                flat_temperature: 1.0,
                revision_rate: 0.5,
                action_shape: vec![2, 2],
            };
            MockTeacher::new(TeacherId::new(i).unwrap(), spec).unwrap()
        };
        let teachers = vec![mk(1, a), mk(2, b)];
        let out = run_debate(&teachers, &DebateState::new(0, "trip"), &settings(2)).unwrap();
        let t = &out.transcript;
        assert_eq!(t.cell(1, 1).unwrap().content, vec![1, 0]);
        assert_eq!(t.cell(2, 1).unwrap().content, vec![0, 1]);
        for k in 1..=2 {
            assert_eq!(t.cell(k, 2).unwrap().content, vec![0, 0], "teacher {k}");
            assert!(t.cell(k, 2).unwrap().confidence > t.cell(k, 1).unwrap().confidence);
        }
    }

    #[test]
    fn longer_debate_extends_shorter_one() {
        let teachers = complementary_pair(0.5);
        let state = DebateState::new(0, "s0");
        let two = run_debate(&teachers, &state, &settings(2)).unwrap();
        let three = run_debate(&teachers, &state, &settings(3)).unwrap();
        assert_eq!(three.transcript.num_rounds(), 3);
        assert_eq!(&three.transcript.rounds()[..2], two.transcript.rounds());
    }

    #[test]
    fn parallel_matches_sequential() {
        let teachers = complementary_pair(0.5);
        let state = DebateState::new(0, "s0");
        let seq = run_debate(&teachers, &state, &settings(3)).unwrap();
        let par = run_debate(
            &teachers,
            &state,
            &DebateSettings {
                parallel: true,
                ..settings(3)
            },
        )
        .unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn round_one_ignores_teacher_order() {
        let mut teachers = complementary_pair(0.5);
        let state = DebateState::new(0, "s0");
        let out = run_debate(&teachers, &state, &settings(1)).unwrap();
        teachers.reverse();
        let swapped: Vec<MockTeacher> = teachers
            .into_iter()
            .enumerate()
            .map(|(j, t)| {
                MockTeacher::new(TeacherId::new(j + 1).unwrap(), t.spec().clone()).unwrap()
            })
            .collect();
        let out2 = run_debate(&swapped, &state, &settings(1)).unwrap();
        assert_eq!(out.post_debate[0], out2.post_debate[1]);
        assert_eq!(out.post_debate[1], out2.post_debate[0]);
    }

    #[test]
    fn unknown_state_rejected() {
        let teachers = complementary_pair(0.5);
        let err = run_debate(&teachers, &DebateState::new(5, "s5"), &settings(2)).unwrap_err();
        assert!(matches!(err, Error::UnknownState(_)));
    }

    #[test]
    fn mock_spec_invariants_enforced() {
        let competent_but_flat = MockTeacherSpec {
            base_table: vec![Distribution::uniform(4).unwrap()],
            competence: [0].into_iter().collect(),
            peak_mass: 0.9,
            flat_temperature: 1.0,
            revision_rate: 0.5,
            action_shape: vec![4],
        };
        assert!(competent_but_flat.validate().is_err());
        let confident_incompetent = MockTeacherSpec {
            base_table: vec![Distribution::new(vec![0.8, 0.1, 0.05, 0.05]).unwrap()],
            competence: BTreeSet::new(),
            ..competent_but_flat.clone()
        };
        assert!(confident_incompetent.validate().is_err());
        let bad_lambda = MockTeacherSpec {
            base_table: vec![Distribution::uniform(4).unwrap()],
            competence: BTreeSet::new(),
            revision_rate: 1.5,
            ..competent_but_flat
        };
        assert!(bad_lambda.validate().is_err());
    }

    #[test]
    fn app_f_layout() {
        let teachers = complementary_pair(0.5);
        let out = run_debate(&teachers, &DebateState::new(0, "s0"), &settings(2)).unwrap();
        let text = out.transcript.to_text().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "[Debate Start]");
        assert!(lines[1].starts_with("[Expert A Initial Answer]: "));
        assert!(lines[2].starts_with("[Expert B Initial Answer]: "));
        assert!(lines[3].starts_with("[Expert A Revised Answer]: "));
        assert!(lines[4].starts_with("[Expert B Revised Answer]: "));
        assert_eq!(lines[5], "[Debate End]");
        assert_eq!(
            lines[1],
            "[Expert A Initial Answer]: 0 Confidence Score: 90"
        );
        let back = DebateTranscript::parse(&text, "s0").unwrap();
        assert_eq!(back, out.transcript);
    }

    #[test]
    fn parse_errors_name_marker() {
        let text = "[Expert A Initial Answer]: 1 Confidence Score: 3\n[Debate End]\n";
        assert_eq!(
            DebateTranscript::parse(text, "s").unwrap_err(),
            Error::MissingMarker {
                marker: "[Debate Start]".into()
            }
        );
        let text = "[Debate Start]\n[Expert A Initial Answer]: 1 Confidence Score: 3\n";
        assert_eq!(
            DebateTranscript::parse(text, "s").unwrap_err(),
            Error::MissingMarker {
                marker: "[Debate End]".into()
            }
        );
        let text = "[Debate Start]\n[Expert A Initial Answer]: 1\n[Debate End]\n";
        assert_eq!(
            DebateTranscript::parse(text, "s").unwrap_err(),
            Error::MissingMarker {
                marker: "Confidence Score:".into()
            }
        );
        let text = "[Debate Start]\n[Expert A Initial Answer]: 1 Confidence Score: 3\n[Expert B Initial Answer]: 1 Confidence Score: 3\n[Expert A Revised Answer]: 1 Confidence Score: 3\n[Debate End]\n";
        assert_eq!(
            DebateTranscript::parse(text, "s").unwrap_err(),
            Error::MissingMarker {
                marker: "[Expert B Revised Answer]".into()
            }
        );
        let text =
            "[Debate Start]\n[Expert A Initial Answer]:  Confidence Score: 3\n[Debate End]\n";
        assert!(matches!(
            DebateTranscript::parse(text, "s").unwrap_err(),
            Error::MalformedTranscript { .. }
        ));
    }

    #[test]
    fn empty_content_rejected() {
        let u = Utterance {
            teacher: TeacherId::new(1).unwrap(),
            round: 1,
            content: vec![],
            confidence: 50.0,
        };
        assert!(DebateTranscript::new("s", vec![vec![u]]).is_err());
    }

    #[test]
    fn jsonl_has_one_line_per_cell() {
        let teachers = complementary_pair(0.5);
        let out = run_debate(&teachers, &DebateState::new(0, "s0"), &settings(2)).unwrap();
        let jsonl = out.transcript.to_jsonl().unwrap();
        let lines: Vec<serde_json::Value> = jsonl
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3]["teacher"], 2);
        assert_eq!(lines[3]["round"], 2);
        assert_eq!(lines[0]["content"], serde_json::json!([0]));
    }

    #[test]
    fn consensus_mixture() {
        let teachers = complementary_pair(0.5);
        let out = run_debate(&teachers, &DebateState::new(0, "s0"), &settings(2)).unwrap();
        let w = confidence_to_weights(&out.confidences);
        let mix = consensus(&out.post_debate, &w).unwrap();
        assert_eq!(mix.argmax(), 0);
    }

    fn transcript_strategy() -> impl Strategy<Value = DebateTranscript> {
        (1usize..5, 1usize..5).prop_flat_map(|(k, r)| {
            proptest::collection::vec(
                (
                    proptest::collection::vec(0usize..1000, 1..4),
                    0.0f64..=100.0,
                ),
                k * r,
            )
            .prop_map(move |cells| {
                let rounds = (0..r)
                    .map(|ri| {
                        (0..k)
                            .map(|ki| {
                                let (content, confidence) = cells[ri * k + ki].clone();
                                Utterance {
                                    teacher: TeacherId::new(ki + 1).unwrap(),
                                    round: ri + 1,
                                    content,
                                    confidence,
                                }
                            })
                            .collect()
                    })
                    .collect();
                DebateTranscript::new("state", rounds).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn text_round_trip(t in transcript_strategy()) {
            let text = t.to_text().unwrap();
            let back = DebateTranscript::parse(&text, "state").unwrap();
            prop_assert_eq!(back, t);
        }
    }
}

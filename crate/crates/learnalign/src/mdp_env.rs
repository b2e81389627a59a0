//! Token-level MDP with deterministic concatenation transitions, synthetic
//! arithmetic reasoning tasks, and the rule-based format + accuracy reward.
//!
//! States are token sequences; an action appends one token. Episodes end when
//! the policy emits `EOS` or the generation horizon is reached. The reward is
//! sparse and terminal:
//!
//!   R(tau) = w_format * R_format(tau) + w_accuracy * R_accuracy(tau)
//!
//! A completion is well formed when it terminates with `EOS` and contains an
//! `ANS` marker with at least one token between the (last) marker and `EOS`;
//! those tokens are the extracted answer. Accuracy requires the extracted
//! answer to equal the reference exactly, so R_accuracy = 1 implies
//! R_format = 1.
//!
//! Task prompts are arithmetic over base-10 digit tokens:
//!   * modular-addition:        a + b mod m        (m in {3,5,7,9})
//!   * modular-multiplication:  a * b mod m
//!   * chained-sum:             a1 + a2 + ... + ak, answer = last digit of the
//!     sum (implicit modulus 10, keeps short chains inside a small policy
//!     context window while long chains stay genuinely hard)

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id. The arithmetic vocabulary uses 16 ids.
pub type Token = u16;

pub const PAD: Token = 0;
pub const EOS: Token = 1;
pub const ANS: Token = 2;
/// Digit d is encoded as `DIGIT_BASE + d`.
pub const DIGIT_BASE: Token = 3;
pub const PLUS: Token = 13;
pub const TIMES: Token = 14;
pub const MOD: Token = 15;
pub const ARITH_VOCAB_SIZE: u16 = 16;

pub fn digit_token(d: u8) -> Token {
    debug_assert!(d < 10);
    DIGIT_BASE + Token::from(d)
}

pub fn token_digit(t: Token) -> Option<u8> {
    if (DIGIT_BASE..DIGIT_BASE + 10).contains(&t) {
        Some((t - DIGIT_BASE) as u8)
    } else {
        None
    }
}

/// Decimal digit tokens of `x`, most significant first, no leading zeros.
pub fn encode_number(x: u64) -> Vec<Token> {
    let mut digits = Vec::new();
    let mut v = x;
    loop {
        digits.push(digit_token((v % 10) as u8));
        v /= 10;
        if v == 0 {
            break;
        }
    }
    digits.reverse();
    digits
}

/// Action space and reserved token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: u16,
    pub pad: Token,
    pub eos: Token,
    pub ans: Token,
}

impl Vocabulary {
    pub fn new(size: u16, pad: Token, eos: Token, ans: Token) -> Result<Self> {
        if size < 16 {
            return Err(Error::Config(format!("vocabulary size {size} < 16")));
        }
        if pad == eos || pad == ans || eos == ans {
            return Err(Error::Config("reserved token ids must be distinct".into()));
        }
        if pad >= size || eos >= size || ans >= size {
            return Err(Error::Config("reserved token ids must be < size".into()));
        }
        Ok(Self { size, pad, eos, ans })
    }

    /// The 16-token arithmetic vocabulary used by the task generator.
    pub fn arithmetic() -> Self {
        Self {
            size: ARITH_VOCAB_SIZE,
            pad: PAD,
            eos: EOS,
            ans: ANS,
        }
    }
}

/// Kind of synthetic arithmetic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ModularAddition,
    ModularMultiplication,
    ChainedSum,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::ModularAddition => "modular-addition",
            TaskKind::ModularMultiplication => "modular-multiplication",
            TaskKind::ChainedSum => "chained-sum",
        };
        f.write_str(s)
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modular-addition" => Ok(TaskKind::ModularAddition),
            "modular-multiplication" => Ok(TaskKind::ModularMultiplication),
            "chained-sum" => Ok(TaskKind::ChainedSum),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

/// One prompt plus its machine-checkable reference answer — the unit of
/// selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDatum {
    pub id: u64,
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    pub kind: TaskKind,
}

impl TaskDatum {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Config(format!("datum {}: empty prompt", self.id)));
        }
        if self.prompt.contains(&EOS) {
            return Err(Error::Config(format!(
                "datum {}: prompt contains EOS",
                self.id
            )));
        }
        if self.answer.is_empty() {
            return Err(Error::Config(format!("datum {}: empty answer", self.id)));
        }
        Ok(())
    }
}

/// Generated completion for one datum. `tokens` holds only the generated
/// part (the prompt is not repeated); when `terminated` the final token is
/// `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub datum_id: u64,
    pub tokens: Vec<Token>,
    pub terminated: bool,
}

/// Weights of the two rule-based reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub format_weight: f64,
    pub accuracy_weight: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            format_weight: 1.0,
            accuracy_weight: 2.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.format_weight < 0.0 || self.accuracy_weight < 0.0 {
            return Err(Error::Config("reward weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Episode parameters shared by rollout generation and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskEnv {
    /// Maximum number of generated tokens per episode (discount fixed at 1).
    pub horizon: usize,
    pub reward_spec: RewardSpec,
}

impl Default for TaskEnv {
    fn default() -> Self {
        Self {
            horizon: 64,
            reward_spec: RewardSpec::default(),
        }
    }
}

impl TaskEnv {
    pub fn reward(&self, trajectory: &Trajectory, datum: &TaskDatum) -> f64 {
        reward(trajectory, datum, &self.reward_spec)
    }
}

/// Deterministic concatenation transition: append `action` to `state`.
/// `limit` is the maximum state length (prompt length + horizon).
pub fn transition(state: &[Token], action: Token, limit: usize) -> Result<Vec<Token>> {
    if state.len() >= limit {
        return Err(Error::HorizonOverflow {
            len: state.len(),
            limit,
        });
    }
    let mut next = Vec::with_capacity(state.len() + 1);
    next.extend_from_slice(state);
    next.push(action);
    Ok(next)
}

/// Tokens between the last `ANS` marker and the terminal `EOS`, or `None`
/// when the output is not well formed.
pub fn extract_answer(trajectory: &Trajectory) -> Option<&[Token]> {
    if !trajectory.terminated {
        return None;
    }
    let tokens = &trajectory.tokens;
    debug_assert_eq!(tokens.last(), Some(&EOS));
    let body = &tokens[..tokens.len() - 1];
    let marker = body.iter().rposition(|&t| t == ANS)?;
    let region = &body[marker + 1..];
    if region.is_empty() {
        None
    } else {
        Some(region)
    }
}

pub fn format_ok(trajectory: &Trajectory) -> bool {
    extract_answer(trajectory).is_some()
}

/// Exact-match correctness of the extracted answer.
pub fn verify_answer(trajectory: &Trajectory, datum: &TaskDatum) -> bool {
    extract_answer(trajectory) == Some(datum.answer.as_slice())
}

/// Rule-based reward: format weight when well formed, plus accuracy weight
/// when the extracted answer matches exactly. Total is always defined.
pub fn reward(trajectory: &Trajectory, datum: &TaskDatum, spec: &RewardSpec) -> f64 {
    match extract_answer(trajectory) {
        None => 0.0,
        Some(region) => {
            let accuracy = if region == datum.answer.as_slice() {
                1.0
            } else {
                0.0
            };
            spec.format_weight + spec.accuracy_weight * accuracy
        }
    }
}

const MODULI: [u64; 4] = [3, 5, 7, 9];
/// Chain lengths and their sampling weights for chained-sum tasks. Short
/// chains fit the default policy window (easy once format is learned),
/// longer chains are progressively out of reach.
const CHAIN_LENGTHS: [(usize, f64); 7] = [
    (2, 0.08),
    (3, 0.27),
    (4, 0.25),
    (5, 0.15),
    (6, 0.10),
    (7, 0.10),
    (8, 0.05),
];

fn weighted_pick<R: Rng>(rng: &mut R, table: &[(usize, f64)]) -> usize {
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(v, w) in table {
        if u < w {
            return v;
        }
        u -= w;
    }
    table.last().unwrap().0
}

fn gen_prompt<R: Rng>(kind: TaskKind, rng: &mut R) -> (Vec<Token>, Vec<Token>) {
    match kind {
        TaskKind::ModularAddition | TaskKind::ModularMultiplication => {
            // Operand magnitude drives difficulty: one- or two-digit operands.
            let da = if rng.gen::<f64>() < 0.5 { 1 } else { 2 };
            let db = if rng.gen::<f64>() < 0.5 { 1 } else { 2 };
            let a = rng.gen_range(0..10u64.pow(da));
            let b = rng.gen_range(0..10u64.pow(db));
            let m = MODULI[rng.gen_range(0..MODULI.len())];
            let op_token = if kind == TaskKind::ModularAddition {
                PLUS
            } else {
                TIMES
            };
            let value = if kind == TaskKind::ModularAddition {
                (a + b) % m
            } else {
                (a * b) % m
            };
            let mut prompt = encode_number(a);
            prompt.push(op_token);
            prompt.extend(encode_number(b));
            prompt.push(MOD);
            prompt.extend(encode_number(m));
            (prompt, encode_number(value))
        }
        TaskKind::ChainedSum => {
            let k = weighted_pick(rng, &CHAIN_LENGTHS);
            let operands: Vec<u64> = (0..k).map(|_| rng.gen_range(0..10u64)).collect();
            let mut prompt = Vec::with_capacity(2 * k - 1);
            for (i, &d) in operands.iter().enumerate() {
                if i > 0 {
                    prompt.push(PLUS);
                }
                prompt.push(digit_token(d as u8));
            }
            let value = operands.iter().sum::<u64>() % 10;
            (prompt, encode_number(value))
        }
    }
}

/// Deterministically generate `count` tasks with unique prompts. Ids are
/// assigned 0..count-1 in generation order.
pub fn generate_task_set(kind: TaskKind, count: usize, seed: u64) -> Result<Vec<TaskDatum>> {
    if count == 0 {
        return Err(Error::Config("task count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<Token>> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let max_attempts = 500 * count + 10_000;
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "could not generate {count} unique {kind} prompts (space exhausted after {attempts} attempts)"
            )));
        }
        let (prompt, answer) = gen_prompt(kind, &mut rng);
        if !seen.insert(prompt.clone()) {
            continue;
        }
        out.push(TaskDatum {
            id: out.len() as u64,
            prompt,
            answer,
            kind,
        });
    }
    Ok(out)
}

/// Write tasks as line-delimited JSON records
/// `{"id", "prompt", "answer", "kind"}`.
pub fn write_tasks(path: &Path, tasks: &[TaskDatum]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        let line = serde_json::to_string(t)
            .map_err(|e| Error::Config(format!("task serialization failed: {e}")))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskDatum>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let datum: TaskDatum = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("bad task record on line {}: {e}", lineno + 1))
        })?;
        datum.validate()?;
        out.push(datum);
    }
    Ok(out)
}

//! Counterfactual objectives over a deterministic log of
//! (question, logged query, reward) triples.
//!
//! Rewards lie in `[0, 1]` and are maximized. A loss in `[-1, 0]` maps to
//! these rewards by `reward = loss + 1`.
//!
//! Every gradient is expressed as per-token coefficients for
//! [`Policy::backward`]:
//!
//! | objective   | coefficient of `∇ log π(y_{t,j} | ·)`            |
//! |-------------|---------------------------------------------------|
//! | DPM         | `δ_t π_t / n`                                     |
//! | DPM+R       | `(δ_t - R̂) π_t / Σ_u π_u`                         |
//! | DPM+OSL     | `δ_t π_t / (m C)`                                 |
//! | DPM+T       | `δ_{t,j} / n`                                     |
//! | DPM+T+OSL   | `δ_{t,j} / (m C)`                                 |
//!
//! where `C = (1/n) Σ_u π_{w'}(y_u | x_u)` is held in a [`ReweightState`].
//! Sequence probabilities are handled in log space throughout.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SupervisedPair;
use crate::mrl::LinearQuery;
use crate::policy::linalg::log_sum_exp;
use crate::policy::{Policy, PolicyError};

pub const REWARD_RANGE: (f64, f64) = (0.0, 1.0);

#[derive(Debug, Error, PartialEq)]
pub enum CfError {
    #[error("log is empty")]
    EmptyLog,
    #[error("all logged sequences have probability zero")]
    DegenerateLog,
    #[error("entry {0} has no token rewards")]
    MissingTokenRewards(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

/// One logged interaction. `token_rewards` is aligned to the tokens of
/// `query`; the closing EOS of the sequence is scored with the sequence
/// reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub question: Vec<String>,
    pub query: LinearQuery,
    pub reward: f64,
    pub token_rewards: Option<Vec<f64>>,
}

fn in_range(r: f64) -> bool {
    r.is_finite() && r >= REWARD_RANGE.0 && r <= REWARD_RANGE.1
}

impl LogEntry {
    pub fn validate(&self) -> Result<(), String> {
        if !in_range(self.reward) {
            return Err(format!("reward {} outside [0, 1]", self.reward));
        }
        if let Some(t) = &self.token_rewards {
            if t.len() != self.query.len() {
                return Err(format!("{} token rewards for {} tokens", t.len(), self.query.len()));
            }
            if let Some(r) = t.iter().find(|r| !in_range(**r)) {
                return Err(format!("token reward {r} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Per-position rewards including the EOS position.
    pub fn token_rewards_with_eos(&self) -> Option<Vec<f64>> {
        self.token_rewards.as_ref().map(|t| {
            let mut v = t.clone();
            v.push(self.reward);
            v
        })
    }
}

pub fn format_log_entry(e: &LogEntry) -> String {
    let mut s = format!("{}\t{}\t{}", e.question.join(" "), e.query, e.reward);
    if let Some(t) = &e.token_rewards {
        let v: Vec<String> = t.iter().map(|r| r.to_string()).collect();
        s.push('\t');
        s.push_str(&v.join(","));
    }
    s
}

pub fn format_log(log: &[LogEntry]) -> String {
    log.iter().map(|e| format_log_entry(e) + "\n").collect()
}

/// Parses `question<TAB>query<TAB>reward[<TAB>r1,r2,...]` lines.
pub fn parse_log(text: &str) -> Result<Vec<LogEntry>, CfError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CfError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 && f.len() != 4 {
            return Err(err(format!("expected 3 or 4 tab-separated fields, got {}", f.len())));
        }
        let question: Vec<String> = f[0].split_whitespace().map(str::to_string).collect();
        if question.is_empty() {
            return Err(err("empty question".into()));
        }
        let query = LinearQuery::parse(f[1]).map_err(|e| err(e.to_string()))?;
        let reward: f64 = f[2].trim().parse().map_err(|_| err(format!("bad reward `{}`", f[2])))?;
        let token_rewards = match f.get(3) {
            None => None,
            Some(s) => Some(
                s.split(',')
                    .map(|r| r.trim().parse::<f64>().map_err(|_| err(format!("bad token reward `{r}`"))))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        let entry = LogEntry {
            question,
            query,
            reward,
            token_rewards,
        };
        entry.validate().map_err(err)?;
        out.push(entry);
    }
    Ok(out)
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, CfError> {
    let text = std::fs::read_to_string(path).map_err(|e| CfError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_log(&text)
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<(), CfError> {
    std::fs::write(path, format_log(log)).map_err(|e| CfError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Anything that assigns a log-probability to a logged sequence.
pub trait SequenceScorer {
    fn log_prob(&self, question: &[String], query: &LinearQuery) -> Result<f64, PolicyError>;
}

impl SequenceScorer for Policy {
    fn log_prob(&self, question: &[String], query: &LinearQuery) -> Result<f64, PolicyError> {
        self.sequence_logprob(question, query)
    }
}

fn log_probs<S: SequenceScorer + ?Sized>(scorer: &S, log: &[LogEntry]) -> Result<Vec<f64>, CfError> {
    if log.is_empty() {
        return Err(CfError::EmptyLog);
    }
    log.iter()
        .map(|e| scorer.log_prob(&e.question, &e.query).map_err(CfError::from))
        .collect()
}

/// `(1/n) Σ δ_t π(y_t | x_t)`
pub fn dpm_value<S: SequenceScorer + ?Sized>(scorer: &S, log: &[LogEntry]) -> Result<f64, CfError> {
    let lp = log_probs(scorer, log)?;
    Ok(log.iter().zip(&lp).map(|(e, l)| e.reward * l.exp()).sum::<f64>() / log.len() as f64)
}

/// `Σ δ_t π_t / Σ π_t`, evaluated as a softmax-weighted mean of rewards.
pub fn dpmr_value<S: SequenceScorer + ?Sized>(scorer: &S, log: &[LogEntry]) -> Result<f64, CfError> {
    let lp = log_probs(scorer, log)?;
    let z = log_sum_exp(&lp);
    if z == f64::NEG_INFINITY {
        return Err(CfError::DegenerateLog);
    }
    let rewards: Vec<f64> = log.iter().map(|e| e.reward).collect();
    Ok(weighted_mean(&rewards, &lp, z))
}

fn weighted_mean(values: &[f64], lp: &[f64], z: f64) -> f64 {
    let first = values[0];
    if values.iter().all(|v| *v == first) {
        return first;
    }
    values.iter().zip(lp).map(|(v, l)| v * (l - z).exp()).sum()
}

/// `(1/n) Σ_t Σ_j δ_{t,j} log π(y_{t,j} | y_{t,<j}, x_t)`, EOS position included.
pub fn dpmt_value(policy: &Policy, log: &[LogEntry]) -> Result<f64, CfError> {
    let enc = encode_log(policy, log)?;
    let mut total = 0.0;
    for (i, e) in enc.iter().enumerate() {
        let tr = e.token_rewards.as_ref().ok_or(CfError::MissingTokenRewards(i))?;
        let fwd = policy.forward(&e.x, &e.y);
        total += fwd.token_logprobs().iter().zip(tr).map(|(l, r)| l * r).sum::<f64>();
    }
    Ok(total / log.len() as f64)
}

/// A log entry mapped to model ids.
#[derive(Debug, Clone)]
pub struct EncodedEntry {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub reward: f64,
    pub token_rewards: Option<Vec<f64>>,
}

pub fn encode_log(policy: &Policy, log: &[LogEntry]) -> Result<Vec<EncodedEntry>, CfError> {
    if log.is_empty() {
        return Err(CfError::EmptyLog);
    }
    log.iter()
        .map(|e| {
            Ok(EncodedEntry {
                x: policy.encode_source(&e.question),
                y: policy.encode_target(&e.query)?,
                reward: e.reward,
                token_rewards: e.token_rewards_with_eos(),
            })
        })
        .collect()
}

fn require_token_rewards(entries: &[EncodedEntry], idx: impl Iterator<Item = usize>) -> Result<(), CfError> {
    for i in idx {
        if entries[i].token_rewards.is_none() {
            return Err(CfError::MissingTokenRewards(i));
        }
    }
    Ok(())
}

/// Sequence-level objective gradients given per-entry weights `w_t`:
/// accumulates `Σ_t w_t ∇ log π_t` over `idx`, where the weight may depend
/// on the entry's current log-probability.
fn seq_grad(
    policy: &Policy,
    entries: &[EncodedEntry],
    idx: &[usize],
    grad: &mut [f64],
    weight: impl Fn(&EncodedEntry, f64) -> f64,
) -> Vec<f64> {
    idx.iter()
        .map(|&i| {
            let e = &entries[i];
            let fwd = policy.forward(&e.x, &e.y);
            let lp = fwd.logprob();
            let w = weight(e, lp);
            policy.backward(&fwd, &vec![w; e.y.len()], grad);
            lp
        })
        .collect()
}

fn token_grad(policy: &Policy, entries: &[EncodedEntry], idx: &[usize], scale: f64, grad: &mut [f64]) -> f64 {
    let mut value = 0.0;
    for &i in idx {
        let e = &entries[i];
        let tr = e.token_rewards.as_ref().expect("checked by caller");
        let fwd = policy.forward(&e.x, &e.y);
        value += fwd.token_logprobs().iter().zip(tr).map(|(l, r)| l * r).sum::<f64>();
        let coeffs: Vec<f64> = tr.iter().map(|r| r * scale).collect();
        policy.backward(&fwd, &coeffs, grad);
    }
    value * scale
}

/// Gradient of [`dpm_value`].
pub fn dpm_grad(policy: &Policy, log: &[LogEntry]) -> Result<Vec<f64>, CfError> {
    let enc = encode_log(policy, log)?;
    let n = enc.len() as f64;
    let mut g = policy.zero_grad();
    let idx: Vec<usize> = (0..enc.len()).collect();
    seq_grad(policy, &enc, &idx, &mut g, |e, lp| e.reward * lp.exp() / n);
    Ok(g)
}

/// Exact gradient of [`dpmr_value`]:
/// `(1/n) Σ_t π̄_t (δ_t - R̂) ∇ log π_t` with `π̄_t = π_t / ((1/n) Σ_u π_u)`.
pub fn dpmr_grad(policy: &Policy, log: &[LogEntry]) -> Result<Vec<f64>, CfError> {
    let enc = encode_log(policy, log)?;
    let lp: Vec<f64> = enc.iter().map(|e| policy.forward(&e.x, &e.y).logprob()).collect();
    let z = log_sum_exp(&lp);
    if z == f64::NEG_INFINITY {
        return Err(CfError::DegenerateLog);
    }
    let rewards: Vec<f64> = enc.iter().map(|e| e.reward).collect();
    let r_hat = weighted_mean(&rewards, &lp, z);
    let mut g = policy.zero_grad();
    let idx: Vec<usize> = (0..enc.len()).collect();
    seq_grad(policy, &enc, &idx, &mut g, |e, l| (e.reward - r_hat) * (l - z).exp());
    Ok(g)
}

/// Gradient of [`dpmt_value`].
pub fn dpmt_grad(policy: &Policy, log: &[LogEntry]) -> Result<Vec<f64>, CfError> {
    let enc = encode_log(policy, log)?;
    require_token_rewards(&enc, 0..enc.len())?;
    let mut g = policy.zero_grad();
    let idx: Vec<usize> = (0..enc.len()).collect();
    token_grad(policy, &enc, &idx, 1.0 / enc.len() as f64, &mut g);
    Ok(g)
}

/// Cached `log π_{w'}(y_t | x_t)` over the whole log and the log of their
/// mean, the one-step-late normalization constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightState {
    log_probs: Vec<f64>,
    log_constant: f64,
    last_update_step: usize,
}

impl ReweightState {
    /// A fixed constant, for tests and ablations.
    pub fn with_constant(constant: f64) -> Result<Self, CfError> {
        if !(constant > 0.0 && constant.is_finite()) {
            return Err(CfError::Config(format!("constant must be positive, got {constant}")));
        }
        Ok(ReweightState {
            log_probs: vec![constant.ln()],
            log_constant: constant.ln(),
            last_update_step: 0,
        })
    }

    pub fn from_log_probs(log_probs: Vec<f64>, step: usize) -> Result<Self, CfError> {
        if log_probs.is_empty() {
            return Err(CfError::EmptyLog);
        }
        let z = log_sum_exp(&log_probs);
        if z == f64::NEG_INFINITY {
            return Err(CfError::DegenerateLog);
        }
        Ok(ReweightState {
            log_constant: z - (log_probs.len() as f64).ln(),
            log_probs,
            last_update_step: step,
        })
    }

    pub fn constant(&self) -> f64 {
        self.log_constant.exp()
    }

    pub fn log_constant(&self) -> f64 {
        self.log_constant
    }

    pub fn cached_log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn last_update_step(&self) -> usize {
        self.last_update_step
    }
}

/// Recomputes the cache under the current parameters.
pub fn update_reweight_state(policy: &Policy, log: &[LogEntry]) -> Result<ReweightState, CfError> {
    let enc = encode_log(policy, log)?;
    refresh(policy, &enc, 0)
}

pub(crate) fn refresh(policy: &Policy, entries: &[EncodedEntry], step: usize) -> Result<ReweightState, CfError> {
    let lp = entries.iter().map(|e| policy.forward(&e.x, &e.y).logprob()).collect();
    ReweightState::from_log_probs(lp, step)
}

/// `(1/m) Σ_{t ∈ batch} δ_t π_w(y_t|x_t) / C` with `C` frozen in `rw`.
pub fn dpm_osl_value(policy: &Policy, batch: &[LogEntry], rw: &ReweightState) -> Result<f64, CfError> {
    Ok(dpm_value(policy, batch)? / rw.constant())
}

pub fn dpm_osl_grad(policy: &Policy, batch: &[LogEntry], rw: &ReweightState) -> Result<Vec<f64>, CfError> {
    let enc = encode_log(policy, batch)?;
    let mut g = policy.zero_grad();
    let idx: Vec<usize> = (0..enc.len()).collect();
    dpm_osl_batch(policy, &enc, &idx, rw, &mut g);
    Ok(g)
}

pub(crate) fn dpm_osl_batch(policy: &Policy, enc: &[EncodedEntry], idx: &[usize], rw: &ReweightState, g: &mut [f64]) -> f64 {
    let m = idx.len() as f64;
    let lc = rw.log_constant;
    let lps = seq_grad(policy, enc, idx, g, |e, lp| e.reward * (lp - lc).exp() / m);
    idx.iter().zip(&lps).map(|(&i, lp)| enc[i].reward * (lp - lc).exp()).sum::<f64>() / m
}

pub(crate) fn dpm_batch(policy: &Policy, enc: &[EncodedEntry], idx: &[usize], g: &mut [f64]) -> f64 {
    let m = idx.len() as f64;
    let lps = seq_grad(policy, enc, idx, g, |e, lp| e.reward * lp.exp() / m);
    idx.iter().zip(&lps).map(|(&i, lp)| enc[i].reward * lp.exp()).sum::<f64>() / m
}

pub(crate) fn dpmt_batch(policy: &Policy, enc: &[EncodedEntry], idx: &[usize], scale_c: f64, g: &mut [f64]) -> f64 {
    token_grad(policy, enc, idx, 1.0 / (idx.len() as f64 * scale_c), g)
}

/// `(1/m) Σ_{t ∈ batch} Σ_j δ_{t,j} log π_w(y_{t,j}|·) / C`.
pub fn dpmt_osl_value(policy: &Policy, batch: &[LogEntry], rw: &ReweightState) -> Result<f64, CfError> {
    Ok(dpmt_value(policy, batch)? / rw.constant())
}

pub fn dpmt_osl_grad(policy: &Policy, batch: &[LogEntry], rw: &ReweightState) -> Result<Vec<f64>, CfError> {
    let enc = encode_log(policy, batch)?;
    require_token_rewards(&enc, 0..enc.len())?;
    let mut g = policy.zero_grad();
    let idx: Vec<usize> = (0..enc.len()).collect();
    dpmt_batch(policy, &enc, &idx, rw.constant(), &mut g);
    Ok(g)
}

/// Fully correct log entries as supervised pairs.
pub fn b2s_extract(log: &[LogEntry]) -> Vec<SupervisedPair> {
    log.iter()
        .filter(|e| e.reward >= REWARD_RANGE.1)
        .map(|e| SupervisedPair {
            question: e.question.clone(),
            query: e.query.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OslSchedule {
    Never,
    Once,
    EveryEpoch,
    EveryValidation,
    /// Refreshes over the whole log before every update; slow.
    EveryMinibatch,
}

impl Default for OslSchedule {
    fn default() -> Self {
        OslSchedule::EveryValidation
    }
}

impl fmt::Display for OslSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OslSchedule::Never => "never",
            OslSchedule::Once => "once",
            OslSchedule::EveryEpoch => "every-epoch",
            OslSchedule::EveryValidation => "every-validation",
            OslSchedule::EveryMinibatch => "every-minibatch",
        })
    }
}

impl FromStr for OslSchedule {
    type Err = CfError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "never" => OslSchedule::Never,
            "once" => OslSchedule::Once,
            "every-epoch" => OslSchedule::EveryEpoch,
            "every-validation" => OslSchedule::EveryValidation,
            "every-minibatch" => OslSchedule::EveryMinibatch,
            _ => return Err(CfError::Config(format!("unknown OSL schedule `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CfObjective {
    #[serde(rename = "dpm")]
    Dpm,
    #[serde(rename = "dpm+osl")]
    DpmOsl,
    #[serde(rename = "dpm+t")]
    DpmT,
    #[serde(rename = "dpm+t+osl")]
    DpmTOsl,
    #[serde(rename = "b2s")]
    B2s,
}

impl CfObjective {
    pub const ALL: [CfObjective; 5] = [
        CfObjective::Dpm,
        CfObjective::DpmOsl,
        CfObjective::DpmT,
        CfObjective::DpmTOsl,
        CfObjective::B2s,
    ];

    pub fn uses_osl(self) -> bool {
        matches!(self, CfObjective::DpmOsl | CfObjective::DpmTOsl)
    }

    pub fn uses_token_rewards(self) -> bool {
        matches!(self, CfObjective::DpmT | CfObjective::DpmTOsl)
    }
}

impl fmt::Display for CfObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CfObjective::Dpm => "DPM",
            CfObjective::DpmOsl => "DPM+OSL",
            CfObjective::DpmT => "DPM+T",
            CfObjective::DpmTOsl => "DPM+T+OSL",
            CfObjective::B2s => "B2S",
        })
    }
}

impl FromStr for CfObjective {
    type Err = CfError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "dpm" => CfObjective::Dpm,
            "dpm+osl" => CfObjective::DpmOsl,
            "dpm+t" => CfObjective::DpmT,
            "dpm+t+osl" => CfObjective::DpmTOsl,
            "b2s" => CfObjective::B2s,
            _ => return Err(CfError::Config(format!("unknown objective `{s}`"))),
        })
    }
}

//! Form queue state, judgments and the append-only event log.
//!
//! Every state change is written as one JSON line before it becomes
//! visible, and the whole state is rebuilt from those lines at startup.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use cfparse_core::cflearn::{format_log, format_log_entry, LogEntry};
use cfparse_core::corpus::SupervisedPair;
use cfparse_core::eval::mean_std;
use cfparse_core::feedback::{map_feedback_to_tokens, Descriptions, FeedbackError, FeedbackRecord, Judgment, Statement, StatementBlock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Forms answered faster than this count as quick in the timing summary.
pub const QUICK_SECS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no form is available")]
    Exhausted,
    #[error("unknown form {0}")]
    UnknownForm(usize),
    #[error("form {0} was already submitted")]
    AlreadySubmitted(usize),
    #[error("form {0} has not been served")]
    NotServed(usize),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("event log line {line}: {msg}")]
    Replay { line: usize, msg: String },
    #[error("event log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Seconds since the epoch; injectable so tests control time.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
    }
}

/// A clock that only moves when told to.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<Mutex<f64>>);

impl ManualClock {
    pub fn new(start: f64) -> Self {
        ManualClock(Arc::new(Mutex::new(start)))
    }

    pub fn advance(&self, secs: f64) {
        *self.0.lock().unwrap() += secs;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    /// A served but unsubmitted form is handed out again after this long.
    pub reserve_timeout_secs: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            reserve_timeout_secs: 600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Served {
        form: usize,
        query: String,
        annotator: String,
        at: f64,
    },
    Submitted {
        form: usize,
        query: String,
        record: FeedbackRecord,
        reward: f64,
        token_rewards: Vec<f64>,
        at: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Submission {
    record: FeedbackRecord,
    reward: f64,
    token_rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Form {
    pair: SupervisedPair,
    block: StatementBlock,
    served_at: Option<f64>,
    submitted: Option<Submission>,
}

/// What an annotator sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormPayload {
    pub id: usize,
    pub question: String,
    pub query: String,
    pub statements: Vec<Statement>,
    pub choices: Vec<Judgment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub id: usize,
    pub reward: f64,
    pub token_rewards: Vec<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub count: usize,
    pub mean_secs: f64,
    pub stddev_secs: f64,
    pub under_10s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Export {
    /// cf-learn log text.
    pub log: String,
    pub timing: TimingSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub forms: usize,
    pub served: usize,
    pub submitted: usize,
}

pub struct FormStore {
    forms: Vec<Form>,
    config: StoreConfig,
    clock: Box<dyn Clock>,
    events: Option<(PathBuf, File)>,
    log_file: Option<(PathBuf, File)>,
}

impl FormStore {
    /// One form per distinct question-query pair, in input order.
    pub fn new(
        pairs: &[SupervisedPair],
        descriptions: &Descriptions,
        config: StoreConfig,
        clock: Box<dyn Clock>,
    ) -> Result<Self, StoreError> {
        let mut seen = HashSet::new();
        let mut forms = Vec::new();
        for p in pairs {
            if !seen.insert((p.question_text(), p.query.to_string())) {
                continue;
            }
            forms.push(Form {
                block: StatementBlock::new(&p.question_text(), &p.query, descriptions)?,
                pair: p.clone(),
                served_at: None,
                submitted: None,
            });
        }
        Ok(FormStore {
            forms,
            config,
            clock,
            events: None,
            log_file: None,
        })
    }

    /// Replays `path` if it exists, then appends every later event to it.
    pub fn with_event_log(mut self, path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: Event = serde_json::from_str(&line).map_err(|e| StoreError::Replay {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                self.apply(&ev).map_err(|msg| StoreError::Replay { line: i + 1, msg })?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        self.events = Some((path.to_path_buf(), file));
        Ok(self)
    }

    /// Also appends each new submission to `path` as a log line, in
    /// submission order. The event log stays the source of truth.
    pub fn with_log_file(mut self, path: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| StoreError::Io {
                path: path.display().to_string(),
                source,
            })?;
        self.log_file = Some((path.to_path_buf(), file));
        Ok(self)
    }

    fn apply(&mut self, ev: &Event) -> Result<(), String> {
        let (form, query) = match ev {
            Event::Served { form, query, .. } | Event::Submitted { form, query, .. } => (*form, query),
        };
        let f = self.forms.get_mut(form).ok_or_else(|| format!("unknown form {form}"))?;
        if f.pair.query.to_string() != *query {
            return Err(format!("form {form} does not match the queue"));
        }
        match ev {
            Event::Served { at, .. } => f.served_at = Some(*at),
            Event::Submitted {
                record,
                reward,
                token_rewards,
                ..
            } => {
                if f.submitted.is_some() {
                    return Err(format!("form {form} submitted twice"));
                }
                f.submitted = Some(Submission {
                    record: record.clone(),
                    reward: *reward,
                    token_rewards: token_rewards.clone(),
                });
            }
        }
        Ok(())
    }

    fn persist(&mut self, ev: &Event) -> Result<(), StoreError> {
        if let Some((path, file)) = &mut self.events {
            let mut line = serde_json::to_string(ev).expect("events serialize");
            line.push('\n');
            let io = |source| StoreError::Io {
                path: path.display().to_string(),
                source,
            };
            file.write_all(line.as_bytes()).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        self.apply(ev).expect("event was validated by the caller");
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn progress(&self) -> Progress {
        Progress {
            forms: self.forms.len(),
            served: self.forms.iter().filter(|f| f.served_at.is_some()).count(),
            submitted: self.forms.iter().filter(|f| f.submitted.is_some()).count(),
        }
    }

    /// The first never-served form, else the first pending form whose
    /// reservation has expired.
    pub fn serve_next(&mut self, annotator: &str) -> Result<FormPayload, StoreError> {
        let now = self.clock.now();
        let timeout = self.config.reserve_timeout_secs;
        let id = self
            .forms
            .iter()
            .position(|f| f.served_at.is_none())
            .or_else(|| {
                self.forms
                    .iter()
                    .position(|f| f.submitted.is_none() && f.served_at.is_some_and(|t| now - t >= timeout))
            })
            .ok_or(StoreError::Exhausted)?;
        self.persist(&Event::Served {
            form: id,
            query: self.forms[id].pair.query.to_string(),
            annotator: annotator.to_string(),
            at: now,
        })?;
        Ok(self.payload(id))
    }

    fn payload(&self, id: usize) -> FormPayload {
        let f = &self.forms[id];
        FormPayload {
            id,
            question: f.block.question.clone(),
            query: f.block.query.to_string(),
            statements: f.block.statements.clone(),
            choices: vec![Judgment::Yes, Judgment::No],
        }
    }

    /// Records judgments for a served form; elapsed time is measured from
    /// the latest serve.
    pub fn submit(&mut self, id: usize, annotator: &str, judgments: Vec<Judgment>) -> Result<Receipt, StoreError> {
        let now = self.clock.now();
        let f = self.forms.get(id).ok_or(StoreError::UnknownForm(id))?;
        if f.submitted.is_some() {
            return Err(StoreError::AlreadySubmitted(id));
        }
        let served = f.served_at.ok_or(StoreError::NotServed(id))?;
        let record = FeedbackRecord {
            judgments,
            elapsed_secs: (now - served).max(0.0),
            annotator: annotator.to_string(),
        };
        let (token_rewards, reward) = map_feedback_to_tokens(&f.block, &record)?;
        let receipt = Receipt {
            id,
            reward,
            token_rewards: token_rewards.clone(),
            elapsed_secs: record.elapsed_secs,
        };
        let entry = LogEntry {
            question: f.pair.question.clone(),
            query: f.pair.query.clone(),
            reward,
            token_rewards: Some(token_rewards.clone()),
        };
        self.persist(&Event::Submitted {
            form: id,
            query: f.pair.query.to_string(),
            record,
            reward,
            token_rewards,
            at: now,
        })?;
        if let Some((path, file)) = &mut self.log_file {
            let line = format_log_entry(&entry) + "\n";
            file.write_all(line.as_bytes())
                .and_then(|_| file.sync_data())
                .map_err(|source| StoreError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
        }
        Ok(receipt)
    }

    /// Submitted forms as log entries, in form order.
    pub fn log_entries(&self) -> Vec<LogEntry> {
        self.forms
            .iter()
            .filter_map(|f| {
                f.submitted.as_ref().map(|s| LogEntry {
                    question: f.pair.question.clone(),
                    query: f.pair.query.clone(),
                    reward: s.reward,
                    token_rewards: Some(s.token_rewards.clone()),
                })
            })
            .collect()
    }

    pub fn timing(&self) -> TimingSummary {
        let secs: Vec<f64> = self
            .forms
            .iter()
            .filter_map(|f| f.submitted.as_ref().map(|s| s.record.elapsed_secs))
            .collect();
        let (mean_secs, stddev_secs) = mean_std(&secs);
        TimingSummary {
            count: secs.len(),
            mean_secs,
            stddev_secs,
            under_10s: secs.iter().filter(|s| **s < QUICK_SECS).count(),
        }
    }

    pub fn export(&self) -> Export {
        Export {
            log: format_log(&self.log_entries()),
            timing: self.timing(),
        }
    }
}

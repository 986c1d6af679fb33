//! The desk-scale simulated-feedback experiment: per seed, generate a
//! corpus, train a baseline, log its outputs on the held-out log questions,
//! simulate feedback against gold, and fine-tune one copy of the baseline
//! per system. Scores are pooled into a significance-tested report.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::{create_log, fully_correct_fraction, simulate_feedback, LoggingRun};
use crate::cflearn::{b2s_extract, CfError, CfObjective, LogEntry, OslSchedule};
use crate::corpus::{dedup_pairs, generate_pairs, scaled_split_sizes, split_dataset, CorpusError, ExpressionTagPair, Splits, Template};
use crate::eval::{experiment_report, ExperimentReport, F1Report, SystemRuns, Verdict};
use crate::geo::GeoDatabase;
use crate::policy::{AdadeltaConfig, ModelConfig, Policy, PolicyError};
use crate::train::{decode_all, init_policy, train_counterfactual, train_supervised, EvalSet, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] CfError),
    #[error("{0}")]
    Config(String),
}

/// A fine-tuned system: an objective with its OSL schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub objective: CfObjective,
    pub schedule: OslSchedule,
}

impl SystemSpec {
    pub fn new(objective: CfObjective, schedule: OslSchedule) -> Self {
        let name = if objective.uses_osl() && schedule != OslSchedule::EveryValidation {
            format!("{objective} ({schedule})")
        } else {
            objective.to_string()
        };
        SystemSpec {
            name,
            objective,
            schedule,
        }
    }
}

/// Main comparison, then the OSL schedule variants.
pub fn default_systems() -> Vec<SystemSpec> {
    use CfObjective::*;
    use OslSchedule::*;
    vec![
        SystemSpec::new(Dpm, Never),
        SystemSpec::new(DpmOsl, EveryValidation),
        SystemSpec::new(DpmT, Never),
        SystemSpec::new(DpmTOsl, EveryValidation),
        SystemSpec::new(B2s, Never),
        SystemSpec::new(DpmTOsl, Once),
        SystemSpec::new(DpmTOsl, EveryEpoch),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Target number of generated pairs before deduplication.
    pub corpus_size: usize,
    /// Supervised, dev and test sizes are the reference sizes divided by this.
    pub split_divisor: usize,
    pub supervised: TrainConfig,
    pub counterfactual: TrainConfig,
    /// Beam of the logging policy.
    pub log_beam: usize,
    pub systems: Vec<SystemSpec>,
    /// Size of the log prefix used for the every-minibatch schedule; 0 skips it.
    pub minibatch_log_size: usize,
    pub ar_iterations: usize,
    pub ar_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig {
            hidden: 64,
            emb: 32,
            max_len: 60,
        };
        let base = TrainConfig {
            model,
            batch_size: 8,
            beam_size: 12,
            validation_interval: Some(200),
            optimizer: AdadeltaConfig {
                lr: 10.0,
                ..Default::default()
            },
            ..Default::default()
        };
        ExperimentConfig {
            seeds: vec![1, 2, 3],
            corpus_size: 1500,
            split_divisor: 20,
            supervised: TrainConfig { epochs: 120, ..base },
            counterfactual: TrainConfig {
                epochs: 10,
                validation_interval: Some(100),
                optimizer: AdadeltaConfig {
                    lr: 3.0,
                    ..Default::default()
                },
                ..base
            },
            log_beam: 12,
            systems: default_systems(),
            minibatch_log_size: 100,
            ar_iterations: 10_000,
            ar_seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() || self.corpus_size == 0 || self.split_divisor == 0 || self.log_beam == 0 {
            return Err(ExperimentError::Config(
                "seeds, corpus_size, split_divisor and log_beam must be non-empty".into(),
            ));
        }
        self.supervised.validate().map_err(ExperimentError::Config)?;
        self.counterfactual.validate().map_err(ExperimentError::Config)?;
        if self.supervised.model != self.counterfactual.model {
            return Err(ExperimentError::Config("fine-tuning must keep the baseline architecture".into()));
        }
        for s in &self.systems {
            if s.objective.uses_osl() && matches!(s.schedule, OslSchedule::Never | OslSchedule::EveryMinibatch) {
                return Err(ExperimentError::Config(format!("{}: schedule {} is not allowed here", s.name, s.schedule)));
            }
        }
        Ok(())
    }
}

/// Test-set outcome of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub name: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub exact_match: usize,
    pub verdicts: Vec<Verdict>,
    pub updates: usize,
    pub best_step: usize,
    pub best_dev_f1: Option<f64>,
    pub osl_refreshes: usize,
    pub secs: f64,
}

impl SystemResult {
    fn new(name: &str, report: F1Report, exact_match: usize, outcome: &TrainOutcome, secs: f64) -> Self {
        SystemResult {
            name: name.to_string(),
            f1: report.f1,
            precision: report.precision,
            recall: report.recall,
            exact_match,
            verdicts: report.verdicts,
            updates: outcome.updates,
            best_step: outcome.best_step,
            best_dev_f1: outcome.best_dev_f1,
            osl_refreshes: outcome.osl_refreshes.len(),
            secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub corpus_pairs: usize,
    pub sizes: [usize; 4],
    pub log_entries: usize,
    pub log_discarded: usize,
    pub fully_correct_fraction: f64,
    pub b2s_pairs: usize,
    pub baseline: SystemResult,
    pub systems: Vec<SystemResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchStudy {
    pub seed: u64,
    pub entries: usize,
    pub result: SystemResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub minibatch: Option<MinibatchStudy>,
    /// Baseline first, then the systems in configuration order; F1 in percent.
    pub report: ExperimentReport,
    pub secs: f64,
}

impl ExperimentOutcome {
    /// Mean test F1 (percent) of the named row.
    pub fn mean_f1(&self, name: &str) -> Option<f64> {
        self.report.rows.iter().find(|r| r.name == name).map(|r| r.mean)
    }

    /// Significance of the difference between two named rows.
    pub fn p_value(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.report.rows.iter().position(|r| r.name == a)?;
        let j = self.report.rows.iter().position(|r| r.name == b)?;
        Some(self.report.p_values[i][j])
    }

    pub fn to_text(&self) -> String {
        let mut s = self.report.to_text();
        for r in &self.seeds {
            s.push_str(&format!(
                "seed {}: {} pairs, sizes {:?}, log {} (+{} discarded), fully correct {:.2}%, B2S {} pairs\n",
                r.seed,
                r.corpus_pairs,
                r.sizes,
                r.log_entries,
                r.log_discarded,
                100.0 * r.fully_correct_fraction,
                r.b2s_pairs
            ));
        }
        if let Some(m) = &self.minibatch {
            s.push_str(&format!(
                "every-minibatch on {} entries (seed {}): F1 {:.2}, {} refreshes, {:.0}s\n",
                m.entries,
                m.seed,
                100.0 * m.result.f1,
                m.result.osl_refreshes,
                m.result.secs
            ));
        }
        s.push_str(&format!("total {:.0}s\n", self.secs));
        s
    }
}

pub const BASELINE: &str = "baseline";

/// Generates, deduplicates and splits a corpus; `rounds` per lexicon entry
/// is chosen to reach `corpus_size`.
pub fn build_splits(
    lexicon: &[ExpressionTagPair],
    templates: &[Template],
    db: &GeoDatabase,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(usize, Splits), ExperimentError> {
    if lexicon.is_empty() {
        return Err(ExperimentError::Config("empty lexicon".into()));
    }
    let gen = crate::corpus::GenConfig {
        rounds: (config.corpus_size / lexicon.len()).max(1),
        ..Default::default()
    };
    let pairs = dedup_pairs(generate_pairs(lexicon, templates, db, &gen, seed)?.pairs);
    let n = pairs.len();
    Ok((n, split_dataset(pairs, scaled_split_sizes(config.split_divisor), seed)?))
}

fn exact_matches(policy: &Policy, pairs: &[crate::corpus::SupervisedPair], beam: usize) -> usize {
    let questions: Vec<Vec<String>> = pairs.iter().map(|p| p.question.clone()).collect();
    decode_all(policy, &questions, beam)
        .iter()
        .zip(pairs)
        .filter(|(o, p)| o.as_ref().is_some_and(|q| q.to_string() == p.query.to_string()))
        .count()
}

pub fn train_baseline(
    splits: &Splits,
    db: &GeoDatabase,
    config: &TrainConfig,
) -> Result<(Policy, SystemResult), ExperimentError> {
    let t = Instant::now();
    let mut policy = init_policy(&splits.sup, &splits.log, config)?;
    let dev = EvalSet::new(db, &splits.dev);
    let out = train_supervised(&mut policy, &splits.sup, config, Some(&dev))?;
    let result = evaluate(&policy, BASELINE, splits, db, config, &out, t);
    Ok((policy, result))
}

fn evaluate(
    policy: &Policy,
    name: &str,
    splits: &Splits,
    db: &GeoDatabase,
    config: &TrainConfig,
    out: &TrainOutcome,
    started: Instant,
) -> SystemResult {
    let report = EvalSet::new(db, &splits.test).evaluate(policy, config.beam_size);
    let exact = exact_matches(policy, &splits.test, config.beam_size);
    let r = SystemResult::new(name, report, exact, out, started.elapsed().as_secs_f64());
    log::info!("{name}: test F1 {:.2} ({} exact) in {:.0}s", 100.0 * r.f1, r.exact_match, r.secs);
    r
}

/// Logs the baseline's top outputs on the log questions and attaches
/// simulated feedback.
pub fn simulated_log(policy: &Policy, splits: &Splits, beam: usize) -> (LoggingRun, Vec<LogEntry>) {
    let questions: Vec<Vec<String>> = splits.log.iter().map(|p| p.question.clone()).collect();
    let run = create_log(policy, &questions, beam);
    let log = simulate_feedback(&run, &splits.log);
    (run, log)
}

/// Fine-tunes a copy of `baseline` on `log`.
pub fn run_system(
    baseline: &Policy,
    log: &[LogEntry],
    spec: &SystemSpec,
    splits: &Splits,
    db: &GeoDatabase,
    config: &TrainConfig,
) -> Result<(Policy, SystemResult), ExperimentError> {
    let t = Instant::now();
    let mut policy = baseline.clone();
    let dev = EvalSet::new(db, &splits.dev);
    let out = train_counterfactual(&mut policy, log, spec.objective, spec.schedule, config, Some(&dev))?;
    let result = evaluate(&policy, &spec.name, splits, db, config, &out, t);
    Ok((policy, result))
}

/// Runs every seed, the every-minibatch study on the first seed, and the
/// pooled report.
pub fn run_experiment(
    lexicon: &[ExpressionTagPair],
    templates: &[Template],
    db: &GeoDatabase,
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    let started = Instant::now();
    let mut seeds = Vec::new();
    let mut minibatch = None;
    for &seed in &config.seeds {
        let sup_cfg = TrainConfig { seed, ..config.supervised };
        let cf_cfg = TrainConfig { seed, ..config.counterfactual };
        let (corpus_pairs, splits) = build_splits(lexicon, templates, db, config, seed)?;
        log::info!(
            "seed {seed}: {corpus_pairs} pairs, {} / {} / {} / {}",
            splits.sup.len(),
            splits.dev.len(),
            splits.test.len(),
            splits.log.len()
        );
        let (baseline, baseline_result) = train_baseline(&splits, db, &sup_cfg)?;
        let (run, log) = simulated_log(&baseline, &splits, config.log_beam);
        if log.is_empty() {
            return Err(ExperimentError::Config(format!("seed {seed}: the baseline logged no valid query")));
        }
        let mut systems = Vec::new();
        for spec in &config.systems {
            systems.push(run_system(&baseline, &log, spec, &splits, db, &cf_cfg)?.1);
        }
        if minibatch.is_none() && config.minibatch_log_size > 0 {
            let k = config.minibatch_log_size.min(log.len());
            let spec = SystemSpec::new(CfObjective::DpmTOsl, OslSchedule::EveryMinibatch);
            let (_, result) = run_system(&baseline, &log[..k], &spec, &splits, db, &cf_cfg)?;
            minibatch = Some(MinibatchStudy { seed, entries: k, result });
        }
        seeds.push(SeedResult {
            seed,
            corpus_pairs,
            sizes: [splits.sup.len(), splits.dev.len(), splits.test.len(), splits.log.len()],
            log_entries: log.len(),
            log_discarded: run.discarded,
            fully_correct_fraction: fully_correct_fraction(&log),
            b2s_pairs: b2s_extract(&log).len(),
            baseline: baseline_result,
            systems,
        });
    }
    let report = pooled_report(&seeds, config.ar_iterations, config.ar_seed);
    Ok(ExperimentOutcome {
        config: config.clone(),
        seeds,
        minibatch,
        report,
        secs: started.elapsed().as_secs_f64(),
    })
}

/// One row per system with per-seed F1 in percent and verdicts pooled over
/// seeds in seed order.
pub fn pooled_report(seeds: &[SeedResult], iterations: usize, seed: u64) -> ExperimentReport {
    let mut rows: Vec<SystemRuns> = Vec::new();
    for r in seeds {
        for s in std::iter::once(&r.baseline).chain(&r.systems) {
            let row = match rows.iter_mut().find(|x| x.name == s.name) {
                Some(row) => row,
                None => {
                    rows.push(SystemRuns {
                        name: s.name.clone(),
                        f1: Vec::new(),
                        verdicts: Vec::new(),
                    });
                    rows.last_mut().expect("just pushed")
                }
            };
            row.f1.push(100.0 * s.f1);
            row.verdicts.extend(&s.verdicts);
        }
    }
    experiment_report(&rows, iterations, seed)
}

//! Work directory layout, per seed:
//!
//! ```text
//! seed-N/corpus/       sup.tsv dev.tsv test.tsv log.tsv summary.json
//! seed-N/baseline/     model/ result.json
//! seed-N/logging/      run.tsv
//! seed-N/simulated/    log.tsv summary.json
//! seed-N/feedback/     events.jsonl log.tsv   (written by serve-feedback)
//! seed-N/cf/<source>/<system>/  model/ result.json
//! report/              report.txt report.json
//! experiment/          outcome.txt outcome.json
//! ```
//!
//! A stage directory is complete once its `stage.json` exists. The record
//! holds the stage parameters and, recursively, the records of its inputs;
//! a stage is skipped when the record it would write is already there.

use std::fs;
use std::path::{Path, PathBuf};

use cfparse_core::bandit::{format_logging_run, fully_correct_fraction, parse_logging_run, simulate_feedback, LoggingRun};
use cfparse_core::cflearn::{b2s_extract, parse_log, write_log, LogEntry};
use cfparse_core::corpus::{read_corpus, write_corpus, Splits, SupervisedPair};
use cfparse_core::eval::{approx_randomization_test, experiment_report, ExperimentReport, SystemRuns};
use cfparse_core::experiment::{build_splits, run_experiment, run_system, train_baseline, ExperimentOutcome, SystemResult, SystemSpec, BASELINE};
use cfparse_core::policy::Policy;
use cfparse_core::train::{EvalSet, TrainConfig};
use cfparse_service::{FormStore, StoreConfig, SystemClock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::CliError;

/// Bumped whenever an artifact format changes; older records are redone.
pub const ARTIFACT_VERSION: u32 = 1;
const STAGE_FILE: &str = "stage.json";
const SPLITS: [&str; 4] = ["sup", "dev", "test", "log"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub version: u32,
    pub stage: String,
    pub params: Value,
    pub inputs: Vec<StageRecord>,
}

impl StageRecord {
    fn new(stage: &str, params: Value, inputs: Vec<StageRecord>) -> Self {
        StageRecord {
            version: ARTIFACT_VERSION,
            stage: stage.into(),
            params,
            inputs,
        }
    }
}

/// Where `train-cf` takes its log from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackSource {
    /// Rewards from comparing logged and gold queries.
    Simulated,
    /// Submissions collected by `serve-feedback`.
    Human,
}

impl FeedbackSource {
    fn dir(self) -> &'static str {
        match self {
            FeedbackSource::Simulated => "simulated",
            FeedbackSource::Human => "human",
        }
    }
}

/// Outcome of `eval`: F1 in percent on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub a: String,
    pub b: String,
    pub f1_a: f64,
    pub f1_b: f64,
    pub delta: f64,
    pub p_value: f64,
}

impl Comparison {
    pub fn to_text(&self) -> String {
        format!(
            "seed {}: {} F1 {:.2}, {} F1 {:.2}, delta {:+.2}, p = {:.4}\n",
            self.seed, self.a, self.f1_a, self.b, self.f1_b, self.delta, self.p_value
        )
    }
}

/// Directory name of a system: lower case, `+` and spaces as `-`.
pub fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('-') && !s.is_empty() {
            s.push('-');
        }
    }
    s.trim_end_matches('-').to_string()
}

pub struct Pipeline {
    pub config: PipelineConfig,
    /// Redo stages even when their record is current.
    pub force: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Pipeline { config, force: false }
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.config.seed_dir(seed)
    }

    fn corpus_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("corpus")
    }

    fn baseline_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("baseline")
    }

    fn logging_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("logging")
    }

    fn simulated_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("simulated")
    }

    pub fn feedback_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("feedback")
    }

    pub fn cf_dir(&self, seed: u64, source: FeedbackSource, spec: &SystemSpec) -> PathBuf {
        self.seed_dir(seed).join("cf").join(source.dir()).join(slug(&spec.name))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.config.workdir.join("report")
    }

    /// Hash of the corpus inputs, so edited data files invalidate the corpus.
    fn data_fingerprint(&self) -> Result<String, CliError> {
        let c = &self.config;
        let mut h = Sha256::new();
        for l in c.lexicon()? {
            h.update(l.to_string().as_bytes());
            h.update(b"\n");
        }
        for t in c.templates()? {
            h.update(format!("{t:?}\n").as_bytes());
        }
        for p in [&c.data.objects, &c.data.areas].into_iter().flatten() {
            h.update(fs::read(p).map_err(|e| CliError::io(p, e))?);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn gen_corpus(&self, seed: u64) -> Result<StageRecord, CliError> {
        let c = &self.config;
        let dir = self.corpus_dir(seed);
        let rec = StageRecord::new(
            "gen-corpus",
            json!({
                "seed": seed,
                "corpus_size": c.corpus_size,
                "split_divisor": c.split_divisor,
                "data": self.data_fingerprint()?,
            }),
            vec![],
        );
        if self.current(&dir, &rec) {
            return Ok(rec);
        }
        begin(&dir)?;
        let (pairs, splits) = build_splits(&c.lexicon()?, &c.templates()?, &c.db()?, &c.experiment(), seed).map_err(CliError::stage)?;
        for (name, part) in SPLITS.iter().zip([&splits.sup, &splits.dev, &splits.test, &splits.log]) {
            let path = dir.join(format!("{name}.tsv"));
            write_corpus(&path, part).map_err(|e| CliError::io(&path, e))?;
        }
        let summary = json!({
            "pairs": pairs,
            "sizes": [splits.sup.len(), splits.dev.len(), splits.test.len(), splits.log.len()],
        });
        write_json(&dir.join("summary.json"), &summary)?;
        log::info!("seed {seed}: {pairs} pairs, split {}", summary["sizes"]);
        finish(&dir, rec)
    }

    pub fn splits(&self, seed: u64) -> Result<Splits, CliError> {
        let dir = self.corpus_dir(seed);
        require(&dir, "gen-corpus")?;
        let read = |name: &str| -> Result<Vec<SupervisedPair>, CliError> {
            let path = dir.join(format!("{name}.tsv"));
            read_corpus(&path).map_err(|e| CliError::io(&path, e))
        };
        Ok(Splits {
            sup: read("sup")?,
            dev: read("dev")?,
            test: read("test")?,
            log: read("log")?,
        })
    }

    fn supervised_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.config.supervised
        }
    }

    fn counterfactual_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.config.counterfactual
        }
    }

    pub fn train_sup(&self, seed: u64) -> Result<StageRecord, CliError> {
        let corpus = require(&self.corpus_dir(seed), "gen-corpus")?;
        let dir = self.baseline_dir(seed);
        let cfg = self.supervised_config(seed);
        let rec = StageRecord::new("train-sup", json!({ "train": cfg }), vec![corpus]);
        if self.current(&dir, &rec) {
            return Ok(rec);
        }
        let splits = self.splits(seed)?;
        begin(&dir)?;
        let (policy, result) = train_baseline(&splits, &self.config.db()?, &cfg).map_err(CliError::stage)?;
        save_model(&policy, &dir)?;
        write_json(&dir.join("result.json"), &result)?;
        finish(&dir, rec)
    }

    pub fn baseline(&self, seed: u64) -> Result<Policy, CliError> {
        let dir = self.baseline_dir(seed);
        require(&dir, "train-sup")?;
        load_model(&dir.join("model"))
    }

    pub fn make_log(&self, seed: u64) -> Result<StageRecord, CliError> {
        let base = require(&self.baseline_dir(seed), "train-sup")?;
        let dir = self.logging_dir(seed);
        let rec = StageRecord::new("make-log", json!({ "beam": self.config.log_beam }), vec![base]);
        if self.current(&dir, &rec) {
            return Ok(rec);
        }
        let policy = self.baseline(seed)?;
        let questions: Vec<Vec<String>> = self.splits(seed)?.log.into_iter().map(|p| p.question).collect();
        begin(&dir)?;
        let run = cfparse_core::bandit::create_log(&policy, &questions, self.config.log_beam);
        log::info!("seed {seed}: logged {} outputs, {} discarded", run.entries.len(), run.discarded);
        write_text(&dir.join("run.tsv"), &format_logging_run(&run))?;
        finish(&dir, rec)
    }

    pub fn logging_run(&self, seed: u64) -> Result<LoggingRun, CliError> {
        let dir = self.logging_dir(seed);
        require(&dir, "make-log")?;
        let path = dir.join("run.tsv");
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        parse_logging_run(&text).map_err(|e| CliError::io(&path, e))
    }

    pub fn simulate_feedback(&self, seed: u64) -> Result<StageRecord, CliError> {
        let logging = require(&self.logging_dir(seed), "make-log")?;
        let corpus = require(&self.corpus_dir(seed), "gen-corpus")?;
        let dir = self.simulated_dir(seed);
        let rec = StageRecord::new("simulate-feedback", json!({}), vec![logging, corpus]);
        if self.current(&dir, &rec) {
            return Ok(rec);
        }
        let run = self.logging_run(seed)?;
        let gold = self.splits(seed)?.log;
        if run.entries.iter().any(|e| e.source >= gold.len()) {
            return Err(CliError::Stage("logging run does not match the log questions".into()));
        }
        begin(&dir)?;
        let log = simulate_feedback(&run, &gold);
        let path = dir.join("log.tsv");
        write_log(&path, &log).map_err(|e| CliError::io(&path, e))?;
        let summary = json!({
            "entries": log.len(),
            "discarded": run.discarded,
            "fully_correct_fraction": fully_correct_fraction(&log),
            "b2s_pairs": b2s_extract(&log).len(),
        });
        write_json(&dir.join("summary.json"), &summary)?;
        finish(&dir, rec)
    }

    /// Forms for every logged output, replaying and extending the seed's
    /// event log.
    pub fn feedback_store(&self, seed: u64, with_log_file: bool) -> Result<FormStore, CliError> {
        let run = self.logging_run(seed)?;
        let pairs: Vec<SupervisedPair> = run
            .entries
            .into_iter()
            .map(|e| SupervisedPair {
                question: e.question,
                query: e.query,
            })
            .collect();
        let dir = self.feedback_dir(seed);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let cfg = StoreConfig {
            reserve_timeout_secs: self.config.service.reserve_timeout_secs,
        };
        let svc = |e: cfparse_service::StoreError| CliError::Service(e.to_string());
        let mut store = FormStore::new(&pairs, &self.config.descriptions()?, cfg, Box::new(SystemClock))
            .map_err(svc)?
            .with_event_log(&dir.join("events.jsonl"))
            .map_err(svc)?;
        if with_log_file {
            store = store.with_log_file(&dir.join("log.tsv")).map_err(svc)?;
        }
        Ok(store)
    }

    /// Blocks serving forms until the process is stopped.
    pub fn serve_feedback(&self, seed: u64) -> Result<(), CliError> {
        let store = self.feedback_store(seed, true)?;
        let addr = self.config.addr()?;
        let p = store.progress();
        log::info!("seed {seed}: {} forms, {} already submitted", p.forms, p.submitted);
        let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Service(e.to_string()))?;
        rt.block_on(cfparse_service::serve(addr, store)).map_err(|e| CliError::Service(e.to_string()))
    }

    /// The log a system is trained on, with the record standing for it.
    fn feedback_log(&self, seed: u64, source: FeedbackSource) -> Result<(Vec<LogEntry>, StageRecord), CliError> {
        match source {
            FeedbackSource::Simulated => {
                let dir = self.simulated_dir(seed);
                let rec = require(&dir, "simulate-feedback")?;
                let path = dir.join("log.tsv");
                let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                Ok((parse_log(&text).map_err(|e| CliError::io(&path, e))?, rec))
            }
            FeedbackSource::Human => {
                let events = self.feedback_dir(seed).join("events.jsonl");
                if !events.exists() {
                    return Err(CliError::MissingStage {
                        stage: "serve-feedback".into(),
                        dir: self.feedback_dir(seed).display().to_string(),
                    });
                }
                let bytes = fs::read(&events).map_err(|e| CliError::io(&events, e))?;
                let log = self.feedback_store(seed, false)?.log_entries();
                let logging = require(&self.logging_dir(seed), "make-log")?;
                let rec = StageRecord::new(
                    "serve-feedback",
                    json!({ "events": hex::encode(Sha256::digest(&bytes)), "entries": log.len() }),
                    vec![logging],
                );
                Ok((log, rec))
            }
        }
    }

    pub fn train_cf(&self, seed: u64, spec: &SystemSpec, source: FeedbackSource) -> Result<StageRecord, CliError> {
        crate::config::check_schedule(spec.objective, spec.schedule)?;
        let base = require(&self.baseline_dir(seed), "train-sup")?;
        let (log, log_rec) = self.feedback_log(seed, source)?;
        if log.is_empty() {
            return Err(CliError::Stage(format!("seed {seed}: the {} log is empty", source.dir())));
        }
        let dir = self.cf_dir(seed, source, spec);
        let cfg = self.counterfactual_config(seed);
        let rec = StageRecord::new("train-cf", json!({ "system": spec, "train": cfg }), vec![base, log_rec]);
        if self.current(&dir, &rec) {
            return Ok(rec);
        }
        let baseline = self.baseline(seed)?;
        let splits = self.splits(seed)?;
        begin(&dir)?;
        let (policy, mut result) = run_system(&baseline, &log, spec, &splits, &self.config.db()?, &cfg).map_err(CliError::stage)?;
        if source == FeedbackSource::Human {
            result.name = format!("{} (human)", spec.name);
        }
        save_model(&policy, &dir)?;
        write_json(&dir.join("result.json"), &result)?;
        finish(&dir, rec)
    }

    /// A checkpoint directory, `baseline`, or a system name (optionally
    /// prefixed `human:`) trained for this seed.
    fn resolve_model(&self, seed: u64, name: &str) -> Result<PathBuf, CliError> {
        if name == BASELINE {
            require(&self.baseline_dir(seed), "train-sup")?;
            return Ok(self.baseline_dir(seed).join("model"));
        }
        let (source, system) = match name.strip_prefix("human:") {
            Some(rest) => (FeedbackSource::Human, rest),
            None => (FeedbackSource::Simulated, name),
        };
        let dir = self.seed_dir(seed).join("cf").join(source.dir()).join(slug(system));
        if dir.join(STAGE_FILE).exists() {
            return Ok(dir.join("model"));
        }
        let path = PathBuf::from(name);
        if path.is_dir() {
            return Ok(path);
        }
        Err(CliError::Config(format!("`{name}` is neither a trained system for seed {seed} nor a checkpoint directory")))
    }

    /// Test F1 of two models and the significance of their difference.
    pub fn eval(&self, seed: u64, a: &str, b: &str) -> Result<Comparison, CliError> {
        let test = self.splits(seed)?.test;
        let db = self.config.db()?;
        let set = EvalSet::new(&db, &test);
        let beam = self.config.counterfactual.beam_size;
        let ra = set.evaluate(&load_model(&self.resolve_model(seed, a)?)?, beam);
        let rb = set.evaluate(&load_model(&self.resolve_model(seed, b)?)?, beam);
        let p_value = approx_randomization_test(&rb.verdicts, &ra.verdicts, self.config.ar_iterations, self.config.ar_seed);
        Ok(Comparison {
            seed,
            a: a.into(),
            b: b.into(),
            f1_a: 100.0 * ra.f1,
            f1_b: 100.0 * rb.f1,
            delta: 100.0 * (rb.f1 - ra.f1),
            p_value,
        })
    }

    /// Pools the results of every seed. Rows: baseline, the configured
    /// systems, then human-feedback systems; a row missing for some seed is
    /// left out so that verdicts stay aligned.
    pub fn report(&self) -> Result<ExperimentReport, CliError> {
        let c = &self.config;
        let mut rows: Vec<SystemRuns> = Vec::new();
        let add = |rows: &mut Vec<SystemRuns>, r: SystemResult| match rows.iter_mut().find(|x| x.name == r.name) {
            Some(row) => {
                row.f1.push(100.0 * r.f1);
                row.verdicts.extend(r.verdicts);
            }
            None => rows.push(SystemRuns {
                name: r.name,
                f1: vec![100.0 * r.f1],
                verdicts: r.verdicts,
            }),
        };
        for &seed in &c.seeds {
            require(&self.baseline_dir(seed), "train-sup")?;
            add(&mut rows, read_json(&self.baseline_dir(seed).join("result.json"))?);
            for spec in &c.systems {
                let dir = self.cf_dir(seed, FeedbackSource::Simulated, spec);
                if dir.join(STAGE_FILE).exists() {
                    add(&mut rows, read_json(&dir.join("result.json"))?);
                }
            }
            let human = self.seed_dir(seed).join("cf").join("human");
            if let Ok(rd) = fs::read_dir(&human) {
                let mut dirs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
                dirs.sort();
                for d in dirs.into_iter().filter(|d| d.join(STAGE_FILE).exists()) {
                    add(&mut rows, read_json(&d.join("result.json"))?);
                }
            }
        }
        rows.retain(|r| {
            let complete = r.f1.len() == c.seeds.len();
            if !complete {
                log::warn!("{}: results for {} of {} seeds, left out", r.name, r.f1.len(), c.seeds.len());
            }
            complete
        });
        let report = experiment_report(&rows, c.ar_iterations, c.ar_seed);
        let dir = self.report_dir();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_text(&dir.join("report.txt"), &report.to_text())?;
        write_json(&dir.join("report.json"), &json!({ "version": ARTIFACT_VERSION, "report": report }))?;
        Ok(report)
    }

    /// Every stage for every seed with simulated feedback, then the report.
    pub fn run_all(&self) -> Result<ExperimentReport, CliError> {
        for &seed in &self.config.seeds {
            self.gen_corpus(seed)?;
            self.train_sup(seed)?;
            self.make_log(seed)?;
            self.simulate_feedback(seed)?;
            for spec in &self.config.systems {
                self.train_cf(seed, spec, FeedbackSource::Simulated)?;
            }
        }
        self.report()
    }

    /// The in-memory experiment including the every-minibatch study.
    pub fn experiment(&self) -> Result<ExperimentOutcome, CliError> {
        let c = &self.config;
        let outcome = run_experiment(&c.lexicon()?, &c.templates()?, &c.db()?, &c.experiment()).map_err(CliError::stage)?;
        let dir = c.workdir.join("experiment");
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_text(&dir.join("outcome.txt"), &outcome.to_text())?;
        write_json(&dir.join("outcome.json"), &outcome)?;
        Ok(outcome)
    }

    fn current(&self, dir: &Path, rec: &StageRecord) -> bool {
        let done = !self.force && read_record(dir).as_ref() == Some(rec);
        if done {
            log::info!("{}: up to date in {}", rec.stage, dir.display());
        }
        done
    }
}

fn read_record(dir: &Path) -> Option<StageRecord> {
    let text = fs::read_to_string(dir.join(STAGE_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn require(dir: &Path, stage: &str) -> Result<StageRecord, CliError> {
    match read_record(dir) {
        Some(r) if r.version == ARTIFACT_VERSION && r.stage == stage => Ok(r),
        _ => Err(CliError::MissingStage {
            stage: stage.into(),
            dir: dir.display().to_string(),
        }),
    }
}

/// Invalidates the directory before any artifact in it is rewritten.
fn begin(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let rec = dir.join(STAGE_FILE);
    if rec.exists() {
        fs::remove_file(&rec).map_err(|e| CliError::io(&rec, e))?;
    }
    Ok(())
}

fn finish(dir: &Path, rec: StageRecord) -> Result<StageRecord, CliError> {
    write_json(&dir.join(STAGE_FILE), &rec)?;
    log::info!("{}: done in {}", rec.stage, dir.display());
    Ok(rec)
}

fn save_model(policy: &Policy, dir: &Path) -> Result<(), CliError> {
    let model = dir.join("model");
    policy.save(&model).map_err(|e| CliError::io(&model, e))
}

fn load_model(dir: &Path) -> Result<Policy, CliError> {
    Policy::load(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::slug;

    #[test]
    fn system_slugs() {
        assert_eq!(slug("DPM+T+OSL (once)"), "dpm-t-osl-once");
        assert_eq!(slug("B2S"), "b2s");
        assert_eq!(slug("DPM+T+OSL (every-epoch)"), "dpm-t-osl-every-epoch");
    }
}

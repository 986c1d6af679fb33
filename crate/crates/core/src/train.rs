//! Minibatch training with periodic validation by answer F1 and selection of
//! the best validated parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cflearn::{self, CfError, CfObjective, EncodedEntry, LogEntry, OslSchedule, ReweightState};
use crate::corpus::SupervisedPair;
use crate::eval::{f1_against_answers, execute_answer, F1Report};
use crate::geo::{AnswerSet, GeoDatabase};
use crate::mrl::LinearQuery;
use crate::policy::{clip_global_norm, Adadelta, Policy, PolicyError};
use crate::policy::{AdadeltaConfig, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Dev-set validations per epoch (spread evenly over its updates).
    pub validations_per_epoch: usize,
    /// Validate every this many updates instead, when set.
    pub validation_interval: Option<usize>,
    pub clip_norm: f64,
    /// Beam used for validation and test decoding.
    pub beam_size: usize,
    pub init_scale: f64,
    #[serde(flatten)]
    pub optimizer: AdadeltaConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 16,
            epochs: 30,
            validations_per_epoch: 4,
            validation_interval: None,
            clip_norm: 1.0,
            beam_size: 12,
            init_scale: 0.08,
            optimizer: AdadeltaConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        if self.batch_size == 0 || self.validations_per_epoch == 0 || self.beam_size == 0 {
            return Err("batch_size, validations_per_epoch and beam_size must be positive".into());
        }
        if self.validation_interval == Some(0) {
            return Err("validation_interval must be positive".into());
        }
        if !(self.clip_norm > 0.0) || !(self.init_scale >= 0.0) {
            return Err("clip_norm must be positive and init_scale non-negative".into());
        }
        let o = &self.optimizer;
        if !(o.rho > 0.0 && o.rho < 1.0 && o.eps > 0.0 && o.lr > 0.0) {
            return Err("optimizer needs 0 < rho < 1, eps > 0, lr > 0".into());
        }
        Ok(())
    }
}

/// Top-1 beam output per question; `None` when the output is not a query.
pub fn decode_all(policy: &Policy, questions: &[Vec<String>], beam_size: usize) -> Vec<Option<LinearQuery>> {
    questions
        .iter()
        .map(|q| {
            policy
                .beam_search(q, beam_size)
                .first()
                .filter(|h| h.finished)
                .and_then(|h| h.query().ok())
        })
        .collect()
}

/// Dev or test set with gold answers executed once.
#[derive(Debug, Clone)]
pub struct EvalSet<'a> {
    db: &'a GeoDatabase,
    questions: Vec<Vec<String>>,
    gold: Vec<Option<AnswerSet>>,
}

impl<'a> EvalSet<'a> {
    pub fn new(db: &'a GeoDatabase, pairs: &[SupervisedPair]) -> Self {
        EvalSet {
            db,
            questions: pairs.iter().map(|p| p.question.clone()).collect(),
            gold: pairs.iter().map(|p| execute_answer(db, &p.query)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn evaluate(&self, policy: &Policy, beam_size: usize) -> F1Report {
        let out = decode_all(policy, &self.questions, beam_size);
        f1_against_answers(&out, &self.gold, self.db)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub dev_f1: Option<f64>,
    /// Mean minibatch objective since the previous record.
    pub objective: Option<f64>,
    pub osl_constant: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    pub best_step: usize,
    pub best_dev_f1: Option<f64>,
    /// Steps at which the OSL constant was recomputed.
    pub osl_refreshes: Vec<usize>,
    pub updates: usize,
}

pub fn format_trace(trace: &[TraceRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    let mut s = String::from("step\tepoch\tdev_f1\tobjective\tosl_constant\n");
    for r in trace {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.step,
            r.epoch,
            opt(r.dev_f1),
            opt(r.objective),
            opt(r.osl_constant)
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Start,
    EpochStart,
    AfterValidation,
    BeforeMinibatch,
}

/// A maximized training objective.
pub trait Objective {
    /// Adds the ascent direction on `batch` to `grad`; returns the batch value.
    fn batch_gradient(&mut self, policy: &Policy, batch: &[usize], grad: &mut [f64]) -> Result<f64, CfError>;
    fn on_event(&mut self, _policy: &Policy, _event: Event, _step: usize) -> Result<(), CfError> {
        Ok(())
    }
    fn osl_constant(&self) -> Option<f64> {
        None
    }
    fn refreshes(&self) -> &[usize] {
        &[]
    }
}

/// Log-likelihood of supervised pairs (negative cross-entropy).
pub struct LogLikelihood {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl LogLikelihood {
    pub fn new(policy: &Policy, pairs: &[SupervisedPair]) -> Result<Self, PolicyError> {
        let pairs = pairs
            .iter()
            .map(|p| Ok((policy.encode_source(&p.question), policy.encode_target(&p.query)?)))
            .collect::<Result<Vec<_>, PolicyError>>()?;
        Ok(LogLikelihood { pairs })
    }
}

impl Objective for LogLikelihood {
    fn batch_gradient(&mut self, policy: &Policy, batch: &[usize], grad: &mut [f64]) -> Result<f64, CfError> {
        let c = 1.0 / batch.len() as f64;
        let mut value = 0.0;
        for &i in batch {
            let (x, y) = &self.pairs[i];
            let fwd = policy.forward(x, y);
            value += fwd.logprob() * c;
            policy.backward(&fwd, &vec![c; y.len()], grad);
        }
        Ok(value)
    }
}

/// DPM, DPM+OSL, DPM+T or DPM+T+OSL over an encoded log.
pub struct Counterfactual {
    objective: CfObjective,
    schedule: OslSchedule,
    entries: Vec<EncodedEntry>,
    rw: Option<ReweightState>,
    refreshes: Vec<usize>,
}

impl Counterfactual {
    pub fn new(policy: &Policy, log: &[LogEntry], objective: CfObjective, schedule: OslSchedule) -> Result<Self, CfError> {
        if objective == CfObjective::B2s {
            return Err(CfError::Config("B2S trains on extracted pairs".into()));
        }
        if objective.uses_osl() && schedule == OslSchedule::Never {
            return Err(CfError::Config(format!("{objective} needs an OSL schedule other than never")));
        }
        let entries = cflearn::encode_log(policy, log)?;
        if objective.uses_token_rewards() {
            if let Some(i) = entries.iter().position(|e| e.token_rewards.is_none()) {
                return Err(CfError::MissingTokenRewards(i));
            }
        }
        Ok(Counterfactual {
            objective,
            schedule,
            entries,
            rw: None,
            refreshes: Vec::new(),
        })
    }

    fn refresh(&mut self, policy: &Policy, step: usize) -> Result<(), CfError> {
        self.rw = Some(cflearn::refresh(policy, &self.entries, step)?);
        self.refreshes.push(step);
        Ok(())
    }
}

impl Objective for Counterfactual {
    fn batch_gradient(&mut self, policy: &Policy, batch: &[usize], grad: &mut [f64]) -> Result<f64, CfError> {
        let e = &self.entries;
        Ok(match self.objective {
            CfObjective::Dpm => cflearn::dpm_batch(policy, e, batch, grad),
            CfObjective::DpmT => cflearn::dpmt_batch(policy, e, batch, 1.0, grad),
            CfObjective::DpmOsl => {
                let rw = self.rw.as_ref().expect("refreshed at start");
                cflearn::dpm_osl_batch(policy, e, batch, rw, grad)
            }
            CfObjective::DpmTOsl => {
                let rw = self.rw.as_ref().expect("refreshed at start");
                cflearn::dpmt_batch(policy, e, batch, rw.constant(), grad)
            }
            CfObjective::B2s => unreachable!("rejected in constructor"),
        })
    }

    fn on_event(&mut self, policy: &Policy, event: Event, step: usize) -> Result<(), CfError> {
        if !self.objective.uses_osl() {
            return Ok(());
        }
        let due = match (self.schedule, event) {
            (OslSchedule::Never, _) => false,
            (_, Event::Start) => true,
            (OslSchedule::EveryEpoch, Event::EpochStart) => step > 0,
            (OslSchedule::EveryValidation, Event::AfterValidation) => step > 0,
            (OslSchedule::EveryMinibatch, Event::BeforeMinibatch) => step > 0,
            _ => false,
        };
        if due {
            self.refresh(policy, step)?;
        }
        Ok(())
    }

    fn osl_constant(&self) -> Option<f64> {
        self.rw.as_ref().map(ReweightState::constant)
    }

    fn refreshes(&self) -> &[usize] {
        &self.refreshes
    }
}

/// Runs `config.epochs` epochs of clipped ADADELTA ascent on `objective`
/// over `n` items, validating on `dev` and leaving `policy` at the best
/// validated parameters (the starting point counts as step 0).
pub fn run<O: Objective>(
    policy: &mut Policy,
    n: usize,
    objective: &mut O,
    config: &TrainConfig,
    dev: Option<&EvalSet>,
) -> Result<TrainOutcome, CfError> {
    config.validate().map_err(CfError::Config)?;
    if n == 0 {
        return Err(CfError::EmptyLog);
    }
    let mut opt = Adadelta::new(policy.params().len(), config.optimizer);
    let mut out = TrainOutcome::default();
    let mut best_params: Option<Vec<f64>> = None;
    let mut step = 0usize;
    let mut obj_sum = 0.0;
    let mut obj_count = 0usize;

    objective.on_event(policy, Event::Start, 0)?;
    let validate = |policy: &Policy,
                        step: usize,
                        epoch: usize,
                        objective_mean: Option<f64>,
                        osl: Option<f64>,
                        out: &mut TrainOutcome,
                        best: &mut Option<Vec<f64>>| {
        let dev_f1 = dev.map(|d| d.evaluate(policy, config.beam_size).f1);
        log::debug!("step {step} epoch {epoch} dev F1 {dev_f1:?} objective {objective_mean:?}");
        out.trace.push(TraceRecord {
            step,
            epoch,
            dev_f1,
            objective: objective_mean,
            osl_constant: osl,
        });
        if let Some(f) = dev_f1 {
            if out.best_dev_f1.map_or(true, |b| f > b) {
                out.best_dev_f1 = Some(f);
                out.best_step = step;
                *best = Some(policy.params().to_vec());
            }
        }
    };
    validate(policy, 0, 0, None, objective.osl_constant(), &mut out, &mut best_params);

    let batches = n.div_ceil(config.batch_size);
    let v = config.validations_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        objective.on_event(policy, Event::EpochStart, step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
        order.shuffle(&mut rng);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            objective.on_event(policy, Event::BeforeMinibatch, step)?;
            let mut g = policy.zero_grad();
            let value = objective.batch_gradient(policy, batch, &mut g)?;
            clip_global_norm(&mut g, config.clip_norm);
            opt.ascend(policy.params_mut(), &g);
            step += 1;
            obj_sum += value;
            obj_count += 1;
            let b = b + 1;
            let due = match config.validation_interval {
                Some(k) => step % k == 0,
                None => (b * v) / batches > ((b - 1) * v) / batches,
            };
            if due {
                let mean = Some(obj_sum / obj_count as f64);
                obj_sum = 0.0;
                obj_count = 0;
                validate(policy, step, epoch, mean, objective.osl_constant(), &mut out, &mut best_params);
                objective.on_event(policy, Event::AfterValidation, step)?;
            }
        }
    }
    out.updates = step;
    out.osl_refreshes = objective.refreshes().to_vec();
    if let Some(p) = best_params {
        policy.params_mut().copy_from_slice(&p);
    }
    Ok(out)
}

/// Builds vocabularies and a freshly initialized policy.
pub fn init_policy(
    sup: &[SupervisedPair],
    extra_questions: &[SupervisedPair],
    config: &TrainConfig,
) -> Result<Policy, PolicyError> {
    use crate::vocab::Vocab;
    let src = Vocab::from_tokens(sup.iter().chain(extra_questions).flat_map(|p| p.question.iter()));
    let tgt = Vocab::from_tokens(sup.iter().flat_map(|p| p.query.token_strings()));
    Policy::new(config.model, src, tgt, config.seed, config.init_scale)
}

/// Cross-entropy training on supervised pairs.
pub fn train_supervised(
    policy: &mut Policy,
    pairs: &[SupervisedPair],
    config: &TrainConfig,
    dev: Option<&EvalSet>,
) -> Result<TrainOutcome, CfError> {
    let mut obj = LogLikelihood::new(policy, pairs)?;
    run(policy, pairs.len(), &mut obj, config, dev)
}

/// Offline learning from a bandit log with the chosen objective.
pub fn train_counterfactual(
    policy: &mut Policy,
    log: &[LogEntry],
    objective: CfObjective,
    schedule: OslSchedule,
    config: &TrainConfig,
    dev: Option<&EvalSet>,
) -> Result<TrainOutcome, CfError> {
    if objective == CfObjective::B2s {
        let pairs = cflearn::b2s_extract(log);
        if pairs.is_empty() {
            return Err(CfError::Config("no fully correct log entries for B2S".into()));
        }
        return train_supervised(policy, &pairs, config, dev);
    }
    let mut obj = Counterfactual::new(policy, log, objective, schedule)?;
    run(policy, log.len(), &mut obj, config, dev)
}

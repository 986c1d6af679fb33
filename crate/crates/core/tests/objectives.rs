mod common;

use cfparse_core::cflearn::*;
use cfparse_core::mrl::LinearQuery;
use cfparse_core::policy::{ce_grad, ce_loss, PolicyError};
use cfparse_core::train::{train_counterfactual, train_supervised, TrainConfig};
use cfparse_core::corpus::SupervisedPair;
use common::*;
use proptest::prelude::*;

/// Scorer with fixed probabilities, looked up by the question's first word.
struct Rigged(Vec<(&'static str, f64)>);

impl SequenceScorer for Rigged {
    fn log_prob(&self, question: &[String], _: &LinearQuery) -> Result<f64, PolicyError> {
        let p = self.0.iter().find(|(k, _)| *k == question[0]).unwrap().1;
        Ok(p.ln())
    }
}

/// Multiplies every probability of the inner scorer by `exp(shift)`.
struct Scaled<'a, S: SequenceScorer>(&'a S, f64);

impl<S: SequenceScorer> SequenceScorer for Scaled<'_, S> {
    fn log_prob(&self, question: &[String], query: &LinearQuery) -> Result<f64, PolicyError> {
        Ok(self.0.log_prob(question, query)? + self.1)
    }
}

fn entry(word: &str, reward: f64) -> LogEntry {
    LogEntry {
        question: vec![word.to_string()],
        query: "x@0".parse().unwrap(),
        reward,
        token_rewards: Some(vec![reward]),
    }
}

fn with_rewards(log: &[LogEntry], f: impl Fn(&LogEntry) -> f64) -> Vec<LogEntry> {
    log.iter()
        .map(|e| LogEntry {
            reward: f(e),
            ..e.clone()
        })
        .collect()
}

fn with_token_rewards(log: &[LogEntry], v: f64) -> Vec<LogEntry> {
    log.iter()
        .map(|e| LogEntry {
            token_rewards: Some(vec![v; e.query.len()]),
            ..e.clone()
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn scaled(g: &[f64], k: f64) -> Vec<f64> {
    g.iter().map(|v| v * k).collect()
}

#[test]
fn dpm_hand_evaluation() {
    let s = Rigged(vec![("a", 0.5), ("b", 0.25)]);
    let v = dpm_value(&s, &[entry("a", 1.0), entry("b", 1.0)]).unwrap();
    assert!((v - 0.375).abs() < 1e-15);
}

#[test]
fn dpmr_hand_evaluation() {
    let s = Rigged(vec![("a", 0.2), ("b", 0.2)]);
    let v = dpmr_value(&s, &[entry("a", 0.0), entry("b", 1.0)]).unwrap();
    assert!((v - 0.5).abs() < 1e-15);
}

#[test]
fn dpmr_is_invariant_to_common_scaling() {
    let s = Rigged(vec![("a", 0.3), ("b", 0.05), ("c", 0.6)]);
    let log = [entry("a", 0.2), entry("b", 1.0), entry("c", 0.7)];
    let base = dpmr_value(&s, &log).unwrap();
    for shift in [-30.0, -2.5, 0.7, 12.0] {
        let v = dpmr_value(&Scaled(&s, shift), &log).unwrap();
        assert!((v - base).abs() < 1e-12, "shift {shift}: {v} vs {base}");
    }
    let dpm = dpm_value(&s, &log).unwrap();
    let dpm_scaled = dpm_value(&Scaled(&s, 2.0_f64.ln()), &log).unwrap();
    assert!((dpm_scaled - 2.0 * dpm).abs() < 1e-12);
}

#[test]
fn degenerate_log_is_reported() {
    let s = Scaled(&Rigged(vec![("a", 0.5)]), f64::NEG_INFINITY);
    assert!(matches!(dpmr_value(&s, &[entry("a", 1.0)]), Err(CfError::DegenerateLog)));
    assert!(matches!(ReweightState::from_log_probs(vec![f64::NEG_INFINITY; 3], 0), Err(CfError::DegenerateLog)));
}

#[test]
fn empty_log_is_rejected() {
    let p = small_policy(1, 3, 2, 0.3);
    assert!(matches!(dpm_value(&p, &[]), Err(CfError::EmptyLog)));
    assert!(matches!(dpm_grad(&p, &[]), Err(CfError::EmptyLog)));
    assert!(matches!(update_reweight_state(&p, &[]), Err(CfError::EmptyLog)));
}

#[test]
fn zero_rewards_give_zero_value_and_gradient() {
    let p = small_policy(2, 3, 2, 0.5);
    let log = with_rewards(&random_log(&mut rng(1), 6), |_| 0.0);
    assert_eq!(dpm_value(&p, &log).unwrap(), 0.0);
    assert!(dpm_grad(&p, &log).unwrap().iter().all(|v| *v == 0.0));
    let zero_t = with_token_rewards(&log, 0.0);
    assert_eq!(dpmt_value(&p, &zero_t).unwrap(), 0.0);
    assert!(dpmt_grad(&p, &zero_t).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn dpm_matches_brute_force_mean() {
    let p = small_policy(3, 4, 3, 0.5);
    let log = random_log(&mut rng(2), 9);
    let brute: f64 = log
        .iter()
        .map(|e| e.reward * p.sequence_logprob(&e.question, &e.query).unwrap().exp())
        .sum::<f64>()
        / 9.0;
    assert!((dpm_value(&p, &log).unwrap() - brute).abs() < 1e-15);
}

#[test]
fn dpmr_brute_force_and_constant_rewards() {
    let p = small_policy(4, 4, 3, 0.8);
    let log = random_log(&mut rng(3), 7);
    let pis: Vec<f64> = log
        .iter()
        .map(|e| p.sequence_logprob(&e.question, &e.query).unwrap().exp())
        .collect();
    let brute = log.iter().zip(&pis).map(|(e, pi)| e.reward * pi).sum::<f64>() / pis.iter().sum::<f64>();
    assert!((dpmr_value(&p, &log).unwrap() - brute).abs() < 1e-13);
    for c in [0.0, 0.37, 1.0] {
        let constant = with_rewards(&log, |_| c);
        assert_eq!(dpmr_value(&p, &constant).unwrap(), c);
        // The exact gradient of a constant vanishes.
        assert!(dpmr_grad(&p, &constant).unwrap().iter().all(|v| v.abs() < 1e-15));
    }
}

#[test]
fn reweight_constant_is_mean_of_cache() {
    let p = small_policy(5, 3, 2, 0.6);
    let log = random_log(&mut rng(4), 11);
    let rw = update_reweight_state(&p, &log).unwrap();
    assert_eq!(rw.cached_log_probs().len(), 11);
    let mean = rw.cached_log_probs().iter().map(|l| l.exp()).sum::<f64>() / 11.0;
    assert!((rw.constant() - mean).abs() < 1e-12 * mean.max(1e-300));
    assert!(rw.constant() > 0.0);
    assert!(ReweightState::with_constant(0.0).is_err());
    assert!(ReweightState::with_constant(f64::NAN).is_err());
}

#[test]
fn osl_with_unit_constant_is_dpm() {
    let p = small_policy(6, 3, 2, 0.6);
    let log = random_log(&mut rng(5), 5);
    let one = ReweightState::with_constant(1.0).unwrap();
    assert_eq!(dpm_osl_grad(&p, &log, &one).unwrap(), dpm_grad(&p, &log).unwrap());
    assert_eq!(dpmt_osl_grad(&p, &log, &one).unwrap(), dpmt_grad(&p, &log).unwrap());
}

#[test]
fn fresh_osl_on_full_log_is_dpm_over_constant() {
    let p = small_policy(7, 4, 3, 0.7);
    let log = random_log(&mut rng(6), 8);
    let rw = update_reweight_state(&p, &log).unwrap();
    let osl = dpm_osl_grad(&p, &log, &rw).unwrap();
    let expect = scaled(&dpm_grad(&p, &log).unwrap(), 1.0 / rw.constant());
    let tol = 1e-10 * expect.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(max_abs_diff(&osl, &expect) <= tol);
}

#[test]
fn dpmr_gradient_is_osl_numerator_minus_correction() {
    // Immediately after a refresh on the full log, the OSL gradient is the
    // first term of the exact reweighted gradient; the second term is the
    // reweighted mean reward times the reweighted score with unit rewards.
    for seed in 0..4 {
        let p = small_policy(seed, 4, 3, 0.9);
        let log = random_log(&mut rng(seed + 20), 6);
        let rw = update_reweight_state(&p, &log).unwrap();
        let r_hat = dpmr_value(&p, &log).unwrap();
        let first = dpm_osl_grad(&p, &log, &rw).unwrap();
        let score = dpm_osl_grad(&p, &with_rewards(&log, |_| 1.0), &rw).unwrap();
        let expect: Vec<f64> = first.iter().zip(&score).map(|(a, s)| a - r_hat * s).collect();
        let exact = dpmr_grad(&p, &log).unwrap();
        let scale = exact.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(max_abs_diff(&exact, &expect) <= 1e-10 * scale, "seed {seed}");
    }
}

#[test]
fn dpmt_with_unit_rewards_is_log_likelihood() {
    let p = small_policy(8, 4, 3, 0.5);
    let log = with_token_rewards(&with_rewards(&random_log(&mut rng(7), 6), |_| 1.0), 1.0);
    let batch: Vec<(Vec<usize>, Vec<usize>)> = log
        .iter()
        .map(|e| (p.encode_source(&e.question), p.encode_target(&e.query).unwrap()))
        .collect();
    assert!((dpmt_value(&p, &log).unwrap() + ce_loss(&p, &batch)).abs() < 1e-12);
    let ce = ce_grad(&p, &batch).unwrap();
    let t = dpmt_grad(&p, &log).unwrap();
    assert!(max_abs_diff(&t, &scaled(&ce, -1.0)) < 1e-10);
}

#[test]
fn dpmt_osl_scales_inversely_with_constant() {
    let p = small_policy(9, 3, 2, 0.5);
    let log = random_log(&mut rng(8), 4);
    let c1 = ReweightState::with_constant(0.3).unwrap();
    let ck = ReweightState::with_constant(0.3 * 8.0).unwrap();
    let g1 = dpmt_osl_grad(&p, &log, &c1).unwrap();
    let gk = dpmt_osl_grad(&p, &log, &ck).unwrap();
    for (a, b) in g1.iter().zip(&gk) {
        assert!((a / 8.0 - b).abs() <= 1e-15 * a.abs().max(1e-300) * 8.0);
    }
    let v1 = dpmt_osl_value(&p, &log, &c1).unwrap();
    let v = dpmt_value(&p, &log).unwrap();
    assert!((v1 - v / 0.3).abs() < 1e-12);
}

#[test]
fn missing_token_rewards_are_an_error() {
    let p = small_policy(1, 3, 2, 0.5);
    let mut log = random_log(&mut rng(9), 3);
    log[2].token_rewards = None;
    assert!(matches!(dpmt_grad(&p, &log), Err(CfError::MissingTokenRewards(2))));
    assert!(matches!(dpmt_value(&p, &log), Err(CfError::MissingTokenRewards(2))));
    let one = ReweightState::with_constant(1.0).unwrap();
    assert!(matches!(dpmt_osl_grad(&p, &log, &one), Err(CfError::MissingTokenRewards(2))));
}

#[test]
fn b2s_keeps_fully_correct_entries_of_human_sized_log() {
    let log: Vec<LogEntry> = (0..995)
        .map(|i| entry(if i % 2 == 0 { "a" } else { "b" }, if i * 531 % 995 < 531 { 1.0 } else { 0.0 }))
        .collect();
    assert_eq!(b2s_extract(&log).len(), 531);
    assert!(b2s_extract(&[]).is_empty());
}

fn pairs_of(log: &[LogEntry]) -> Vec<SupervisedPair> {
    log.iter()
        .map(|e| SupervisedPair {
            question: e.question.clone(),
            query: e.query.clone(),
        })
        .collect()
}

#[test]
fn unit_token_rewards_reproduce_supervised_trajectory() {
    let p0 = small_policy(10, 4, 3, 0.3);
    // The EOS position carries the sequence reward, so it is set to 1 as well.
    let log = with_token_rewards(&with_rewards(&random_log(&mut rng(10), 10), |_| 1.0), 1.0);
    let cfg = TrainConfig {
        batch_size: 3,
        epochs: 4,
        seed: 5,
        ..Default::default()
    };
    let mut a = p0.clone();
    train_counterfactual(&mut a, &log, CfObjective::DpmT, OslSchedule::Never, &cfg, None).unwrap();
    let mut b = p0.clone();
    train_supervised(&mut b, &pairs_of(&log), &cfg, None).unwrap();
    assert_ne!(a.params(), p0.params());
    assert!(max_abs_diff(a.params(), b.params()) < 1e-10);
}

#[test]
fn osl_schedules_refresh_at_the_documented_points() {
    let p0 = small_policy(11, 3, 2, 0.3);
    let log = random_log(&mut rng(11), 10);
    // 10 entries, batch 3 -> 4 updates per epoch; 2 validations per epoch.
    let cfg = TrainConfig {
        batch_size: 3,
        epochs: 3,
        validations_per_epoch: 2,
        ..Default::default()
    };
    let run = |schedule| {
        let mut p = p0.clone();
        train_counterfactual(&mut p, &log, CfObjective::DpmTOsl, schedule, &cfg, None)
            .unwrap()
            .osl_refreshes
    };
    assert_eq!(run(OslSchedule::Once), vec![0]);
    assert_eq!(run(OslSchedule::EveryEpoch), vec![0, 4, 8]);
    assert_eq!(run(OslSchedule::EveryValidation), vec![0, 2, 4, 6, 8, 10, 12]);
    assert_eq!(run(OslSchedule::EveryMinibatch), (0..12).collect::<Vec<_>>());
    let mut p = p0.clone();
    assert!(train_counterfactual(&mut p, &log, CfObjective::DpmOsl, OslSchedule::Never, &cfg, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dpmr_of_constant_rewards_is_that_constant(seed in 0u64..10_000, c in 0.0f64..=1.0, n in 1usize..8) {
        let p = small_policy(seed, 3, 2, 1.0);
        let log = with_rewards(&random_log(&mut rng(seed), n), |_| c);
        prop_assert_eq!(dpmr_value(&p, &log).unwrap(), c);
    }

    #[test]
    fn dpm_value_is_bounded_by_mean_reward(seed in 0u64..10_000, n in 1usize..8) {
        let p = small_policy(seed, 3, 2, 1.0);
        let log = random_log(&mut rng(seed), n);
        let v = dpm_value(&p, &log).unwrap();
        let mean = log.iter().map(|e| e.reward).sum::<f64>() / n as f64;
        prop_assert!(v >= 0.0 && v <= mean + 1e-15);
        let r = dpmr_value(&p, &log).unwrap();
        let lo = log.iter().map(|e| e.reward).fold(f64::INFINITY, f64::min);
        let hi = log.iter().map(|e| e.reward).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r >= lo - 1e-12 && r <= hi + 1e-12);
    }
}

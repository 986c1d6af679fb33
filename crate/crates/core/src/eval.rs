//! Answer-level F1 against the geo database and significance testing.

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geo::{AnswerSet, GeoDatabase};
use crate::mrl::{delinearize, LinearQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Non-empty answer equal to the gold answer.
    Correct,
    /// Non-empty answer that differs from the gold answer.
    Wrong,
    /// Empty answer, including execution failures and unparsable output.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when no answer was non-empty, in which case precision is 0.
    pub precision_undefined: bool,
    pub correct: usize,
    pub non_empty: usize,
    pub total: usize,
    pub verdicts: Vec<Verdict>,
}

impl F1Report {
    pub fn from_verdicts(verdicts: Vec<Verdict>) -> Self {
        let total = verdicts.len();
        let correct = verdicts.iter().filter(|v| **v == Verdict::Correct).count();
        let non_empty = verdicts.iter().filter(|v| **v != Verdict::Empty).count();
        let recall = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        let precision_undefined = non_empty == 0;
        let precision = if precision_undefined {
            0.0
        } else {
            correct as f64 / non_empty as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Report {
            precision,
            recall,
            f1,
            precision_undefined,
            correct,
            non_empty,
            total,
            verdicts,
        }
    }
}

/// Executes a query; parse and execution failures yield `None`.
pub fn execute_answer(db: &GeoDatabase, query: &LinearQuery) -> Option<AnswerSet> {
    let tree = delinearize(query).ok()?;
    db.execute(&tree).ok()
}

pub fn verdict(system: Option<&AnswerSet>, gold: Option<&AnswerSet>) -> Verdict {
    match system {
        None => Verdict::Empty,
        Some(a) if a.is_empty() => Verdict::Empty,
        Some(a) if Some(a) == gold => Verdict::Correct,
        Some(_) => Verdict::Wrong,
    }
}

/// `system[i] = None` stands for an output that is not a query at all.
pub fn answer_f1(system: &[Option<LinearQuery>], gold: &[LinearQuery], db: &GeoDatabase) -> F1Report {
    assert_eq!(system.len(), gold.len(), "system and gold lists must be aligned");
    let gold_answers: Vec<Option<AnswerSet>> = gold.iter().map(|g| execute_answer(db, g)).collect();
    f1_against_answers(system, &gold_answers, db)
}

/// Like [`answer_f1`] with gold answers computed beforehand.
pub fn f1_against_answers(system: &[Option<LinearQuery>], gold: &[Option<AnswerSet>], db: &GeoDatabase) -> F1Report {
    assert_eq!(system.len(), gold.len(), "system and gold lists must be aligned");
    let verdicts = system
        .iter()
        .zip(gold)
        .map(|(s, g)| {
            let a = s.as_ref().and_then(|q| execute_answer(db, q));
            verdict(a.as_ref(), g.as_ref())
        })
        .collect();
    F1Report::from_verdicts(verdicts)
}

fn f1_of(correct: usize, non_empty: usize, total: usize) -> f64 {
    if correct == 0 {
        return 0.0;
    }
    let p = correct as f64 / non_empty as f64;
    let r = correct as f64 / total as f64;
    2.0 * p * r / (p + r)
}

fn counts(v: &[Verdict]) -> (usize, usize) {
    (
        v.iter().filter(|x| **x == Verdict::Correct).count(),
        v.iter().filter(|x| **x != Verdict::Empty).count(),
    )
}

/// Approximate randomization test on the absolute F1 difference: each
/// item's pair of outputs is swapped with probability 1/2, and the p-value
/// is `(hits + 1) / (iterations + 1)`.
pub fn approx_randomization_test(a: &[Verdict], b: &[Verdict], iterations: usize, seed: u64) -> f64 {
    assert_eq!(a.len(), b.len(), "verdict lists must be aligned");
    let n = a.len();
    let (ca, na) = counts(a);
    let (cb, nb) = counts(b);
    let observed = (f1_of(ca, na, n) - f1_of(cb, nb, n)).abs();
    // Only items on which the systems differ change the statistic.
    let diffs: Vec<(i64, i64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x != y)
        .map(|(x, y)| {
            let c = (*x == Verdict::Correct) as i64 - (*y == Verdict::Correct) as i64;
            let e = (*x != Verdict::Empty) as i64 - (*y != Verdict::Empty) as i64;
            (c, e)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..iterations {
        let (mut xa, mut xna, mut xb, mut xnb) = (ca as i64, na as i64, cb as i64, nb as i64);
        for &(dc, de) in &diffs {
            if rng.gen_bool(0.5) {
                xa -= dc;
                xna -= de;
                xb += dc;
                xnb += de;
            }
        }
        let stat = (f1_of(xa as usize, xna as usize, n) - f1_of(xb as usize, xnb as usize, n)).abs();
        if stat >= observed - 1e-12 {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (iterations + 1) as f64
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Test F1 scores (in percent) of one system across runs, with the pooled
/// per-question verdicts of all runs for significance testing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemRuns {
    pub name: String,
    pub f1: Vec<f64>,
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub mean: f64,
    pub stddev: f64,
    pub delta: f64,
    /// 1-based row numbers this system beats with p below the significance level.
    pub beats: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    /// `p_values[i][j]` for rows i and j.
    pub p_values: Vec<Vec<f64>>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Mean ± sample standard deviation per system, delta against the first
/// system, and pairwise significance markers.
pub fn experiment_report(systems: &[SystemRuns], iterations: usize, seed: u64) -> ExperimentReport {
    assert!(systems.iter().all(|s| !s.f1.is_empty()), "every system needs a run");
    let stats: Vec<(f64, f64)> = systems.iter().map(|s| mean_std(&s.f1)).collect();
    let base = stats.first().map(|s| s.0).unwrap_or(0.0);
    let k = systems.len();
    let mut p_values = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let p = if systems[i].verdicts.len() == systems[j].verdicts.len() {
                approx_randomization_test(&systems[i].verdicts, &systems[j].verdicts, iterations, seed)
            } else {
                1.0
            };
            p_values[i][j] = p;
            p_values[j][i] = p;
        }
    }
    let rows = systems
        .iter()
        .zip(&stats)
        .enumerate()
        .map(|(i, (s, &(mean, stddev)))| ReportRow {
            name: s.name.clone(),
            mean,
            stddev,
            delta: mean - base,
            beats: (0..k)
                .filter(|&j| j != i && stats[i].0 > stats[j].0 && p_values[i][j] < SIGNIFICANCE_LEVEL)
                .map(|j| j + 1)
                .collect(),
        })
        .collect();
    ExperimentReport { rows, p_values }
}

impl ExperimentReport {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len() + 2 + marker_len(r)).max().unwrap_or(0).max(6);
        let mut s = format!("{:>2}  {:<width$}  {:>14}  {:>7}\n", "#", "system", "F1", "ΔF1");
        for (i, r) in self.rows.iter().enumerate() {
            let name = if r.beats.is_empty() {
                r.name.clone()
            } else {
                let m: Vec<String> = r.beats.iter().map(|b| b.to_string()).collect();
                format!("{}^{}", r.name, m.join(","))
            };
            let delta = if i == 0 { String::new() } else { format!("{:+.2}", r.delta) };
            let _ = writeln!(s, "{:>2}  {:<width$}  {:>7.2} ± {:<4.2}  {:>7}", i + 1, name, r.mean, r.stddev, delta);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn marker_len(r: &ReportRow) -> usize {
    r.beats.iter().map(|b| b.to_string().len() + 1).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use Verdict::*;

    #[test]
    fn three_question_case() {
        let r = F1Report::from_verdicts(vec![Correct, Wrong, Empty]);
        assert!((r.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.precision - 0.5).abs() < 1e-15);
        assert!((r.f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_precision_is_flagged() {
        let r = F1Report::from_verdicts(vec![Empty, Empty]);
        assert!(r.precision_undefined);
        assert_eq!((r.precision, r.f1), (0.0, 0.0));
        assert_eq!(F1Report::from_verdicts(vec![Correct; 4]).f1, 1.0);
    }

    #[test]
    fn identical_systems_have_p_one() {
        let a = vec![Correct, Wrong, Empty, Correct];
        assert_eq!(approx_randomization_test(&a, &a, 500, 1), 1.0);
    }

    #[test]
    fn single_run_has_zero_stddev() {
        assert_eq!(mean_std(&[42.0]), (42.0, 0.0));
    }
}

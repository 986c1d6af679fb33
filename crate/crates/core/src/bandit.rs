//! Deterministic logging with a frozen policy and simulated feedback
//! against gold queries.

use crate::cflearn::{CfError, LogEntry};
use crate::corpus::SupervisedPair;
use crate::mrl::{delinearize, LinearQuery};
use crate::policy::Policy;

#[derive(Debug, Clone)]
pub struct LoggedOutput {
    /// Index into the source question list.
    pub source: usize,
    pub question: Vec<String>,
    pub query: LinearQuery,
}

#[derive(Debug, Clone, Default)]
pub struct LoggingRun {
    pub entries: Vec<LoggedOutput>,
    /// Questions whose top output did not form a valid query.
    pub discarded: usize,
}

/// Parses every question with the top beam output. Outputs that are not
/// well-formed trees are dropped and counted.
pub fn create_log(policy: &Policy, questions: &[Vec<String>], beam_size: usize) -> LoggingRun {
    let mut run = LoggingRun::default();
    for (i, q) in questions.iter().enumerate() {
        let best = policy.beam_search(q, beam_size).into_iter().next();
        let query = best
            .filter(|h| h.finished)
            .and_then(|h| h.query().ok())
            .filter(|y| delinearize(y).is_ok());
        match query {
            Some(query) => run.entries.push(LoggedOutput {
                source: i,
                question: q.clone(),
                query,
            }),
            None => run.discarded += 1,
        }
    }
    run
}

/// 1 iff the linearized queries are identical.
pub fn simulate_seq_feedback(logged: &LinearQuery, gold: &LinearQuery) -> f64 {
    if logged.to_string() == gold.to_string() {
        1.0
    } else {
        0.0
    }
}

/// 1 at every position where the logged token equals the gold token at the
/// same index; positions past the end of the gold query get 0.
pub fn simulate_token_feedback(logged: &LinearQuery, gold: &LinearQuery) -> Vec<f64> {
    logged
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, t)| match gold.tokens().get(i) {
            Some(g) if g == t => 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Attaches simulated sequence and token rewards using the gold query of
/// each logged question.
pub fn simulate_feedback(run: &LoggingRun, gold: &[SupervisedPair]) -> Vec<LogEntry> {
    run.entries
        .iter()
        .map(|e| {
            let g = &gold[e.source].query;
            LogEntry {
                question: e.question.clone(),
                query: e.query.clone(),
                reward: simulate_seq_feedback(&e.query, g),
                token_rewards: Some(simulate_token_feedback(&e.query, g)),
            }
        })
        .collect()
}

/// Share of entries with sequence reward 1.
pub fn fully_correct_fraction(log: &[LogEntry]) -> f64 {
    if log.is_empty() {
        return 0.0;
    }
    log.iter().filter(|e| e.reward == 1.0).count() as f64 / log.len() as f64
}

/// `source<TAB>question<TAB>query` lines, with the discarded count in a
/// leading `# discarded N` comment.
pub fn format_logging_run(run: &LoggingRun) -> String {
    let mut s = format!("# discarded {}\n", run.discarded);
    for e in &run.entries {
        s.push_str(&format!("{}\t{}\t{}\n", e.source, e.question.join(" "), e.query));
    }
    s
}

pub fn parse_logging_run(text: &str) -> Result<LoggingRun, CfError> {
    let mut run = LoggingRun::default();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| CfError::Parse { line: i + 1, msg };
        let line = line.trim_end_matches('\r');
        if let Some(rest) = line.strip_prefix("# discarded ") {
            run.discarded = rest.trim().parse().map_err(|_| err(format!("bad count `{rest}`")))?;
            continue;
        }
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", f.len())));
        }
        let source = f[0].parse().map_err(|_| err(format!("bad source index `{}`", f[0])))?;
        let question: Vec<String> = f[1].split_whitespace().map(str::to_string).collect();
        if question.is_empty() {
            return Err(err("empty question".into()));
        }
        let query = LinearQuery::parse(f[2]).map_err(|e| err(e.to_string()))?;
        run.entries.push(LoggedOutput { source, question, query });
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &str) -> LinearQuery {
        s.parse().unwrap()
    }

    #[test]
    fn sequence_feedback() {
        let g = q("qtype@1 count@0");
        assert_eq!(simulate_seq_feedback(&g, &g), 1.0);
        assert_eq!(simulate_seq_feedback(&q("qtype@1 exist@0"), &g), 0.0);
    }

    #[test]
    fn token_feedback_positions() {
        let g = q("query@3 area@1 a@s nwr@1 b@s qtype@1 count@0");
        assert_eq!(simulate_token_feedback(&g, &g), vec![1.0; 7]);
        let pre = q("query@3 area@1 a@s nwr@1 c@s qtype@1 count@0 x@0 y@0");
        assert_eq!(
            simulate_token_feedback(&pre, &g),
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(simulate_token_feedback(&q("x@0 y@0"), &q("a@0 b@0")), vec![0.0, 0.0]);
    }

    #[test]
    fn logging_run_file_round_trip() {
        let run = LoggingRun {
            entries: vec![LoggedOutput {
                source: 4,
                question: vec!["Is".into(), "there".into()],
                query: q("query@2 area@1 a€b@s qtype@1 exist@0"),
            }],
            discarded: 2,
        };
        let back = parse_logging_run(&format_logging_run(&run)).unwrap();
        assert_eq!(back.discarded, 2);
        assert_eq!(back.entries[0].source, 4);
        assert_eq!(back.entries[0].query, run.entries[0].query);
        assert!(matches!(parse_logging_run("x\ty\n"), Err(CfError::Parse { line: 1, .. })));
        assert!(parse_logging_run("1\tq\tnot@a@token\n").is_err());
    }
}

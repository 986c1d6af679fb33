use std::cmp::Ordering;

use crate::mrl::{LinearQuery, MrlError, Token};
use crate::vocab::{BOS_ID, EOS_ID};

use super::Policy;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output ids without the closing EOS.
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Sequence log-probability, EOS included when `finished`.
    pub logprob: f64,
    /// False when decoding hit the length limit before EOS.
    pub finished: bool,
}

impl Hypothesis {
    /// Parses the tokens as a linear query (fails on reserved symbols).
    pub fn query(&self) -> Result<LinearQuery, MrlError> {
        let toks = self
            .tokens
            .iter()
            .map(|t| t.parse::<Token>())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LinearQuery::new(toks))
    }
}

struct Live {
    ids: Vec<usize>,
    logprob: f64,
    state: Vec<f64>,
}

fn by_score(a: &(usize, usize, f64), b: &(usize, usize, f64)) -> Ordering {
    b.2.partial_cmp(&a.2)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
        .then(a.1.cmp(&b.1))
}

fn hypothesis(policy: &Policy, ids: Vec<usize>, logprob: f64, finished: bool) -> Hypothesis {
    let tokens = ids
        .iter()
        .map(|&i| policy.tgt_vocab().token(i).unwrap_or_default().to_string())
        .collect();
    Hypothesis {
        ids,
        tokens,
        logprob,
        finished,
    }
}

/// Beam search without length normalization. A hypothesis that emits EOS
/// leaves the beam and shrinks it by one; the search ends when the beam is
/// empty or `max_len` tokens were produced. Results are sorted by
/// log-probability; unfinished hypotheses are returned only if nothing
/// finished.
pub(super) fn beam_search(policy: &Policy, x: &[usize], beam_size: usize) -> Vec<Hypothesis> {
    assert!(beam_size >= 1, "beam size must be positive");
    let enc = policy.encode(x);
    let mut live = vec![Live {
        ids: Vec::new(),
        logprob: 0.0,
        state: enc.initial_state().to_vec(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut k = beam_size;
    let max_len = policy.config().max_len;
    for _ in 0..max_len {
        if k == 0 || live.is_empty() {
            break;
        }
        let mut steps = Vec::with_capacity(live.len());
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (hi, hyp) in live.iter().enumerate() {
            let prev = hyp.ids.last().copied().unwrap_or(BOS_ID);
            let st = policy.step(&enc, &hyp.state, prev);
            let mut local: Vec<(usize, usize, f64)> =
                st.logp.iter().enumerate().map(|(v, lp)| (hi, v, hyp.logprob + lp)).collect();
            if local.len() > k {
                local.select_nth_unstable_by(k - 1, by_score);
                local.truncate(k);
            }
            cands.extend(local);
            steps.push(st);
        }
        cands.sort_by(by_score);
        cands.truncate(k);
        let mut next = Vec::with_capacity(cands.len());
        for (hi, v, score) in cands {
            let mut ids = live[hi].ids.clone();
            if v == EOS_ID {
                finished.push(hypothesis(policy, ids, score, true));
                k -= 1;
            } else {
                ids.push(v);
                next.push(Live {
                    ids,
                    logprob: score,
                    state: steps[hi].state().to_vec(),
                });
            }
        }
        live = next;
    }
    if finished.is_empty() {
        finished = live.into_iter().map(|h| hypothesis(policy, h.ids, h.logprob, false)).collect();
    }
    finished.sort_by(|a, b| b.logprob.partial_cmp(&a.logprob).unwrap_or(Ordering::Equal));
    finished
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_decode<S: AsRef<str>>(policy: &Policy, x: &[S]) -> Hypothesis {
    let enc = policy.encode(&policy.encode_source(x));
    let mut state = enc.initial_state().to_vec();
    let mut ids = Vec::new();
    let mut lp = 0.0;
    let mut prev = BOS_ID;
    for _ in 0..policy.config().max_len {
        let st = policy.step(&enc, &state, prev);
        let mut best = 0;
        for (v, &l) in st.logp.iter().enumerate() {
            if l > st.logp[best] {
                best = v;
            }
        }
        lp += st.logp[best];
        if best == EOS_ID {
            return hypothesis(policy, ids, lp, true);
        }
        ids.push(best);
        prev = best;
        state = st.state().to_vec();
    }
    hypothesis(policy, ids, lp, false)
}

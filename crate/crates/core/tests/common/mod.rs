#![allow(dead_code)]

use std::collections::BTreeSet;

use cfparse_core::cflearn::LogEntry;
use cfparse_core::feedback::{StatementKind, DIRECTIONS};
use cfparse_core::mrl::{LanguageTable, LinearQuery, Marker, QueryTree};
use cfparse_core::policy::{ModelConfig, Policy};
use cfparse_core::vocab::{Vocab, EOS_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SRC: [&str; 3] = ["a", "b", "c"];
pub const TGT: [&str; 3] = ["x@0", "y@1", "z@s"];

/// Randomly initialized hand-sized policy.
pub fn small_policy(seed: u64, hidden: usize, emb: usize, scale: f64) -> Policy {
    let cfg = ModelConfig {
        hidden,
        emb,
        max_len: 6,
    };
    Policy::new(cfg, Vocab::from_tokens(SRC), Vocab::from_tokens(TGT), seed, scale).unwrap()
}

pub fn random_question(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.gen_range(1..=4);
    (0..n).map(|_| SRC[rng.gen_range(0..SRC.len())].to_string()).collect()
}

pub fn random_output(rng: &mut ChaCha8Rng, max: usize) -> LinearQuery {
    let n = rng.gen_range(1..=max);
    let toks: Vec<String> = (0..n).map(|_| TGT[rng.gen_range(0..TGT.len())].to_string()).collect();
    LinearQuery::parse(&toks.join(" ")).unwrap()
}

pub fn random_log(rng: &mut ChaCha8Rng, n: usize) -> Vec<LogEntry> {
    (0..n)
        .map(|_| {
            let query = random_output(rng, 3);
            let token_rewards: Vec<f64> = (0..query.len()).map(|_| rng.gen_range(0.0..=1.0)).collect();
            LogEntry {
                question: random_question(rng),
                reward: rng.gen_range(0.0..=1.0),
                token_rewards: Some(token_rewards),
                query,
            }
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference gradient of `f` at the policy's parameters.
pub fn numeric_grad(policy: &Policy, h: f64, f: impl Fn(&Policy) -> f64) -> Vec<f64> {
    let mut p = policy.clone();
    (0..policy.params().len())
        .map(|i| {
            let orig = p.params()[i];
            p.params_mut()[i] = orig + h;
            let up = f(&p);
            p.params_mut()[i] = orig - h;
            let down = f(&p);
            p.params_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

const KEYS: [&str; 6] = ["name", "amenity", "tourism", "shop", "website", "opening_hours"];
const WORDS: [&str; 8] = ["Paris", "Royal", "hotel", "Saint", "Denis", "atm", "Gare", "du Nord"];
const DIRS: [&str; 4] = ["north", "east", "south", "west"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

fn random_value(rng: &mut ChaCha8Rng) -> QueryTree {
    let n = rng.gen_range(1..=3);
    let words: Vec<&str> = (0..n).map(|_| pick(rng, &WORDS)).collect();
    QueryTree::value(words.join(" "))
}

fn random_keyval(rng: &mut ChaCha8Rng) -> QueryTree {
    QueryTree::node("keyval", vec![QueryTree::leaf(pick(rng, &KEYS)), random_value(rng)])
}

/// Any subtree the language table admits, built bottom-up at random.
pub fn random_subtree(rng: &mut ChaCha8Rng, table: &LanguageTable, depth: usize) -> QueryTree {
    if depth == 0 || rng.gen_bool(0.25) {
        return match rng.gen_range(0..4) {
            0 => QueryTree::leaf(pick(rng, &KEYS)),
            1 => random_value(rng),
            2 => QueryTree::leaf(pick(rng, &["count", "latlong", "exist", "WALKING_DIST", "DIST_INTOWN"])),
            _ => random_keyval(rng),
        };
    }
    let ops: Vec<(&str, Vec<usize>)> = table
        .operators()
        .map(|(op, set)| (op, set.iter().copied().collect::<Vec<usize>>()))
        .filter(|(op, set)| *op != "query" && *op != "qtype" && !set.contains(&0))
        .collect();
    let (op, arities) = &ops[rng.gen_range(0..ops.len())];
    let k = arities[rng.gen_range(0..arities.len())];
    QueryTree::node(*op, (0..k).map(|_| random_subtree(rng, table, depth - 1)).collect())
}

fn random_qtype(rng: &mut ChaCha8Rng) -> QueryTree {
    let arg = match rng.gen_range(0..4) {
        0 => QueryTree::leaf("count"),
        1 => QueryTree::leaf("latlong"),
        2 => QueryTree::leaf("exist"),
        _ => QueryTree::node("findkey", vec![QueryTree::leaf(pick(rng, &KEYS))]),
    };
    QueryTree::node("qtype", vec![arg])
}

/// A valid query: half follow the usual shapes (plain, cardinal, around
/// with or without topx), half wrap an arbitrary admissible subtree.
pub fn random_query_tree(rng: &mut ChaCha8Rng, table: &LanguageTable) -> QueryTree {
    let area = |rng: &mut ChaCha8Rng| QueryTree::node("area", vec![random_keyval(rng)]);
    let nwr = |rng: &mut ChaCha8Rng| QueryTree::node("nwr", vec![random_keyval(rng)]);
    let qtype = random_qtype(rng);
    match rng.gen_range(0..6) {
        0 => QueryTree::node("query", vec![area(rng), nwr(rng), qtype]),
        1 => {
            let dir = pick(rng, &DIRS);
            QueryTree::node("query", vec![QueryTree::node(dir, vec![area(rng), nwr(rng)]), qtype])
        }
        2 => {
            let center = QueryTree::node("center", vec![area(rng), nwr(rng)]);
            let search = QueryTree::node("search", vec![nwr(rng)]);
            let dist = QueryTree::leaf(pick(rng, &["WALKING_DIST", "DIST_INTOWN"]));
            let mut args = vec![center, search, QueryTree::node("maxdist", vec![dist])];
            if rng.gen_bool(0.5) {
                args.push(QueryTree::node("topx", vec![QueryTree::value(rng.gen_range(1..4).to_string())]));
            }
            QueryTree::node("query", vec![QueryTree::node("around", args), qtype])
        }
        _ => {
            let depth = rng.gen_range(1..=5);
            let mut children = vec![random_subtree(rng, table, depth)];
            if rng.gen_bool(0.5) {
                children.push(random_subtree(rng, table, depth));
            }
            children.insert(rng.gen_range(0..=children.len()), qtype);
            QueryTree::node("query", children)
        }
    }
}

/// Trigger conditions read straight off the token sequence, tracking the
/// open operators with a stack instead of building a tree.
pub fn expected_kinds(query: &LinearQuery) -> BTreeSet<StatementKind> {
    use StatementKind::*;
    let toks = query.tokens();
    let mut ancestors: Vec<Vec<String>> = Vec::new();
    let mut open: Vec<(String, usize)> = Vec::new();
    for t in toks {
        ancestors.push(open.iter().map(|(op, _)| op.clone()).collect());
        if let Some((_, left)) = open.last_mut() {
            *left -= 1;
        }
        if t.arity() > 0 {
            open.push((t.surface().to_string(), t.arity()));
        }
        while open.last().is_some_and(|(_, left)| *left == 0) {
            open.pop();
        }
    }
    let is_op = |i: usize, name: &str| toks[i].surface() == name && toks[i].marker() != Marker::Str;
    let any = |name: &str| (0..toks.len()).any(|i| is_op(i, name));
    let center_set = any("center");
    let mut kinds = BTreeSet::new();
    for i in 0..toks.len() {
        if !is_op(i, "keyval") {
            continue;
        }
        let under = |op: &str| ancestors[i].iter().any(|a| a == op);
        if under("area") {
            kinds.insert(Town);
        } else if under("center") {
            kinds.insert(ReferencePoint);
        } else if (center_set && under("search")) || (!center_set && under("nwr")) {
            kinds.insert(Pois);
        }
    }
    if (0..toks.len()).any(|i| is_op(i, "qtype") && toks[i].arity() > 0) {
        kinds.insert(QuestionType);
    }
    if any("around") {
        kinds.insert(Proximity);
        if any("topx") {
            kinds.insert(RestrictionClosest);
        }
    }
    if (0..toks.len()).any(|i| is_op(i, "maxdist") && toks[i].arity() > 0) {
        kinds.insert(Distance);
    }
    if DIRECTIONS.iter().any(|d| any(d)) {
        kinds.insert(CardinalDirection);
    }
    kinds
}

/// Every sequence of at most `max_len` tokens followed by EOS, with score.
pub fn enumerate(p: &Policy, x: &[usize]) -> Vec<(Vec<usize>, f64)> {
    let v = p.tgt_vocab().len();
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for len in 0..=p.config().max_len {
        for prefix in &frontier {
            let mut y = prefix.clone();
            y.push(EOS_ID);
            if len < p.config().max_len {
                out.push((prefix.clone(), p.forward(x, &y).logprob()));
            }
        }
        frontier = frontier
            .iter()
            .flat_map(|pre| {
                (0..v).filter(|&t| t != EOS_ID).map(move |t| {
                    let mut n = pre.clone();
                    n.push(t);
                    n
                })
            })
            .collect();
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    out
}

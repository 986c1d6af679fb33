//! Human-judgeable statements derived from a query, and the mapping of
//! Yes/No judgments back to per-token rewards.
//!
//! Statement types and what triggers them:
//!
//! | type               | trigger                                              |
//! |--------------------|------------------------------------------------------|
//! | Town               | tags inside `area`                                   |
//! | Reference Point    | tags inside `center` (outside its `area`)            |
//! | POI(s)             | tags inside `search` if `center` is set, else `nwr`  |
//! | Question Type      | arguments of `qtype`                                 |
//! | Proximity          | `around` present                                     |
//! | Restriction: Closest | `around` and `topx` present                        |
//! | Distance           | argument of `maxdist`                                |
//! | Cardinal Direction | `north`, `east`, `south` or `west` present           |
//!
//! Statements cover token positions of the linear query (pre-order node
//! indices). A token covered by any No statement gets reward 0; all other
//! tokens, including uncovered structural ones, get 1.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{DIST_INTOWN, WALKING_DIST};
use crate::mrl::{delinearize, LinearQuery, MrlError, QueryTree};

pub const DEFAULT_DESCRIPTIONS: &str = include_str!("../data/descriptions.tsv");
pub const DIRECTIONS: [&str; 4] = ["north", "east", "south", "west"];

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("expected {expected} judgments, got {got}")]
    IncompleteJudgments { expected: usize, got: usize },
    #[error("elapsed time must be finite and non-negative")]
    NegativeElapsed,
    #[error(transparent)]
    Query(#[from] MrlError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StatementKind {
    #[serde(rename = "Town")]
    Town,
    #[serde(rename = "Reference Point")]
    ReferencePoint,
    #[serde(rename = "POI(s)")]
    Pois,
    #[serde(rename = "Question Type")]
    QuestionType,
    #[serde(rename = "Proximity")]
    Proximity,
    #[serde(rename = "Restriction: Closest")]
    RestrictionClosest,
    #[serde(rename = "Distance")]
    Distance,
    #[serde(rename = "Cardinal Direction")]
    CardinalDirection,
}

impl StatementKind {
    pub const ALL: [StatementKind; 8] = [
        StatementKind::Town,
        StatementKind::ReferencePoint,
        StatementKind::Pois,
        StatementKind::QuestionType,
        StatementKind::Proximity,
        StatementKind::RestrictionClosest,
        StatementKind::Distance,
        StatementKind::CardinalDirection,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StatementKind::Town => "Town",
            StatementKind::ReferencePoint => "Reference Point",
            StatementKind::Pois => "POI(s)",
            StatementKind::QuestionType => "Question Type",
            StatementKind::Proximity => "Proximity",
            StatementKind::RestrictionClosest => "Restriction: Closest",
            StatementKind::Distance => "Distance",
            StatementKind::CardinalDirection => "Cardinal Direction",
        }
    }
}

impl fmt::Display for StatementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    #[serde(rename = "type")]
    pub kind: StatementKind,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tooltip: Option<String>,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementBlock {
    pub question: String,
    pub query: LinearQuery,
    pub statements: Vec<Statement>,
}

impl StatementBlock {
    pub fn new(question: &str, query: &LinearQuery, descriptions: &Descriptions) -> Result<Self, FeedbackError> {
        Ok(StatementBlock {
            question: question.to_string(),
            query: query.clone(),
            statements: generate_statements(query, descriptions)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgment {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub judgments: Vec<Judgment>,
    pub elapsed_secs: f64,
    pub annotator: String,
}

/// Offline tag and key documentation used for tooltips.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Descriptions {
    entries: HashMap<String, String>,
}

impl Descriptions {
    /// Parses `key=value<TAB>description` or `key<TAB>description` lines.
    pub fn parse(text: &str) -> Result<Self, FeedbackError> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |msg: &str| FeedbackError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (tag, desc) = line.split_once('\t').ok_or_else(|| err("expected tag<TAB>description"))?;
            if tag.trim().is_empty() || desc.trim().is_empty() {
                return Err(err("empty tag or description"));
            }
            if entries.insert(tag.trim().to_string(), desc.trim().to_string()).is_some() {
                return Err(err("duplicate tag"));
            }
        }
        Ok(Descriptions { entries })
    }

    pub fn read(path: &Path) -> Result<Self, FeedbackError> {
        let text = std::fs::read_to_string(path).map_err(|e| FeedbackError::Parse {
            line: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_DESCRIPTIONS).expect("bundled descriptions parse")
    }

    /// Description of `key=value`, falling back to the bare key; `""` if unknown.
    pub fn tooltip_lookup(&self, key: &str, value: Option<&str>) -> String {
        value
            .and_then(|v| self.entries.get(&format!("{key}={v}")))
            .or_else(|| self.entries.get(key))
            .cloned()
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

struct Visited<'a> {
    idx: usize,
    size: usize,
    tree: &'a QueryTree,
    ancestors: Vec<&'a str>,
}

fn flatten(tree: &QueryTree) -> Vec<Visited<'_>> {
    fn go<'a>(t: &'a QueryTree, anc: &mut Vec<&'a str>, next: &mut usize, out: &mut Vec<Visited<'a>>) {
        out.push(Visited {
            idx: *next,
            size: t.size(),
            tree: t,
            ancestors: anc.clone(),
        });
        *next += 1;
        if let Some(op) = t.op() {
            anc.push(op);
            for c in t.children() {
                go(c, anc, next, out);
            }
            anc.pop();
        }
    }
    let mut out = Vec::new();
    go(tree, &mut Vec::new(), &mut 0, &mut out);
    out
}

fn surface(t: &QueryTree) -> String {
    match t {
        QueryTree::Value(v) => v.clone(),
        QueryTree::Node { op, .. } => op.clone(),
    }
}

fn question_type_text(arg: &QueryTree) -> String {
    match arg.op() {
        Some("count") => "count".into(),
        Some("latlong") => "location".into(),
        Some("exist") => "existence".into(),
        Some("findkey") => {
            let keys: Vec<String> = arg.children().iter().map(surface).collect();
            format!("value of {}", keys.join(", "))
        }
        _ => surface(arg),
    }
}

fn distance_text(arg: &QueryTree) -> String {
    match arg.op() {
        Some(s) if s == WALKING_DIST => "walking distance".into(),
        Some(s) if s == DIST_INTOWN => "within town".into(),
        _ => surface(arg),
    }
}

/// The statements triggered by `query`, in the fixed type order above.
pub fn generate_statements(query: &LinearQuery, descriptions: &Descriptions) -> Result<Vec<Statement>, FeedbackError> {
    let tree = delinearize(query)?;
    let nodes = flatten(&tree);
    let has = |op: &str| nodes.iter().any(|n| n.tree.op() == Some(op));
    let has_center = has("center");
    let span = |n: &Visited| n.idx..n.idx + n.size;

    let mut town = Vec::new();
    let mut reference = Vec::new();
    let mut pois = Vec::new();
    for n in nodes.iter().filter(|n| n.tree.op() == Some("keyval")) {
        let inside = |op: &str| n.ancestors.contains(&op);
        let group = if inside("area") {
            &mut town
        } else if inside("center") {
            &mut reference
        } else if (has_center && inside("search")) || (!has_center && inside("nwr")) {
            &mut pois
        } else {
            continue;
        };
        group.push(n);
    }

    let mut out = Vec::new();
    let tag_statement = |kind: StatementKind, group: &[&Visited], names_only: bool| -> Option<Statement> {
        if group.is_empty() {
            return None;
        }
        let mut texts = Vec::new();
        let mut tips = Vec::new();
        let mut tokens = Vec::new();
        for n in group {
            let ch = n.tree.children();
            let key = ch.first().map(surface).unwrap_or_default();
            let value = ch.get(1).map(surface);
            texts.push(match (&value, names_only && key == "name") {
                (Some(v), true) => v.clone(),
                (Some(v), false) => format!("{key}={v}"),
                (None, _) => key.clone(),
            });
            let tip = descriptions.tooltip_lookup(&key, value.as_deref());
            if !tip.is_empty() {
                tips.push(tip);
            }
            tokens.extend(span(n));
        }
        Some(Statement {
            kind,
            text: texts.join(", "),
            tooltip: (!tips.is_empty()).then(|| tips.join(" ")),
            tokens,
        })
    };
    out.extend(tag_statement(StatementKind::Town, &town, true));
    out.extend(tag_statement(StatementKind::ReferencePoint, &reference, true));
    out.extend(tag_statement(StatementKind::Pois, &pois, false));

    // nodes are in pre-order, so nodes[i].idx == i
    let args_of = |op: &str| -> Vec<&Visited> {
        let mut out = Vec::new();
        for n in nodes.iter().filter(|n| n.tree.op() == Some(op)) {
            let mut c = n.idx + 1;
            for _ in n.tree.children() {
                out.push(&nodes[c]);
                c += nodes[c].size;
            }
        }
        out
    };

    let qargs = args_of("qtype");
    if !qargs.is_empty() {
        let mut tips = Vec::new();
        for a in &qargs {
            if a.tree.op() == Some("findkey") {
                for k in a.tree.children() {
                    let t = descriptions.tooltip_lookup(&surface(k), None);
                    if !t.is_empty() {
                        tips.push(t);
                    }
                }
            }
        }
        out.push(Statement {
            kind: StatementKind::QuestionType,
            text: qargs.iter().map(|a| question_type_text(a.tree)).collect::<Vec<_>>().join(", "),
            tooltip: (!tips.is_empty()).then(|| tips.join(" ")),
            tokens: qargs.iter().flat_map(|a| span(a)).collect(),
        });
    }

    let arounds: Vec<&Visited> = nodes.iter().filter(|n| n.tree.op() == Some("around")).collect();
    if !arounds.is_empty() {
        out.push(Statement {
            kind: StatementKind::Proximity,
            text: "around".into(),
            tooltip: None,
            tokens: arounds.iter().map(|n| n.idx).collect(),
        });
        let topx: Vec<&Visited> = nodes.iter().filter(|n| n.tree.op() == Some("topx")).collect();
        if !topx.is_empty() {
            let counts: Vec<String> = topx
                .iter()
                .flat_map(|n| n.tree.children().iter().map(surface))
                .collect();
            out.push(Statement {
                kind: StatementKind::RestrictionClosest,
                text: if counts.iter().all(|c| c == "1") {
                    "closest".into()
                } else {
                    format!("closest {}", counts.join(", "))
                },
                tooltip: None,
                tokens: topx.iter().flat_map(|n| span(n)).collect(),
            });
        }
    }

    let dargs = args_of("maxdist");
    if !dargs.is_empty() {
        out.push(Statement {
            kind: StatementKind::Distance,
            text: dargs.iter().map(|a| distance_text(a.tree)).collect::<Vec<_>>().join(", "),
            tooltip: None,
            tokens: dargs.iter().flat_map(|a| span(a)).collect(),
        });
    }

    let dirs: Vec<&Visited> = nodes
        .iter()
        .filter(|n| n.tree.op().is_some_and(|o| DIRECTIONS.contains(&o)))
        .collect();
    if !dirs.is_empty() {
        out.push(Statement {
            kind: StatementKind::CardinalDirection,
            text: dirs.iter().map(|n| surface(n.tree)).collect::<Vec<_>>().join(", "),
            tooltip: None,
            tokens: dirs.iter().map(|n| n.idx).collect(),
        });
    }
    Ok(out)
}

/// Token rewards (aligned to the query) and the sequence reward.
pub fn map_feedback_to_tokens(block: &StatementBlock, record: &FeedbackRecord) -> Result<(Vec<f64>, f64), FeedbackError> {
    if record.judgments.len() != block.statements.len() {
        return Err(FeedbackError::IncompleteJudgments {
            expected: block.statements.len(),
            got: record.judgments.len(),
        });
    }
    if !(record.elapsed_secs >= 0.0 && record.elapsed_secs.is_finite()) {
        return Err(FeedbackError::NegativeElapsed);
    }
    let mut rewards = vec![1.0; block.query.len()];
    for (s, j) in block.statements.iter().zip(&record.judgments) {
        if *j == Judgment::No {
            for &t in &s.tokens {
                if let Some(r) = rewards.get_mut(t) {
                    *r = 0.0;
                }
            }
        }
    }
    let seq = if record.judgments.iter().all(|j| *j == Judgment::Yes) {
        1.0
    } else {
        0.0
    };
    Ok((rewards, seq))
}

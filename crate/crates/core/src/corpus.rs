//! Synthetic question-query corpus generation by placeholder sampling.
//!
//! For every expression-tag pair of a lexicon (`cash machines` -> `amenity=atm`)
//! a template is drawn and its placeholders filled from the database:
//!
//! * `$LOC`  a city in which the tag has at least one object,
//! * `$POI`  a named object of that city (reference point),
//! * `$QTYPE` uniform over count / where / is-there / key (chooses the template),
//! * `$KEY`  a key seen on the objects the query selects,
//! * `$DIST` walking distance (adds "in walking distance") or within the city,
//! * `$DIR`  a cardinal direction for cardinal templates.
//!
//! Each pair is sampled `rounds` times (two by default).

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geo::{GeoDatabase, DIST_INTOWN, WALKING_DIST};
use crate::mrl::{delinearize, escape_value, LanguageTable, LinearQuery, MrlError};

pub const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.tsv");
pub const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.tsv");

/// The four question types, in template-file spelling.
pub const QTYPES: [&str; 4] = ["count", "latlong", "exist", "findkey"];
const DIRECTIONS: [&str; 4] = ["north", "south", "east", "west"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no object carries {0} in any city")]
    NoMatchingObjects(String),
    #[error("could not fill a template for `{0}`")]
    Unfillable(String),
    #[error("split sizes {wanted} exceed corpus size {available}")]
    InsufficientData { wanted: usize, available: usize },
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error(transparent)]
    Query(#[from] MrlError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExpressionTagPair {
    pub expression: String,
    pub key: String,
    pub value: String,
}

impl fmt::Display for ExpressionTagPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}={}", self.expression, self.key, self.value)
    }
}

/// A question (token sequence) with its gold query.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SupervisedPair {
    pub question: Vec<String>,
    pub query: LinearQuery,
}

impl SupervisedPair {
    pub fn question_text(&self) -> String {
        self.question.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub structure: String,
    pub qtype: String,
    pub question: String,
    pub query: String,
}

impl Template {
    fn uses(&self, placeholder: &str) -> bool {
        self.question.contains(placeholder) || self.query.contains(placeholder)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    /// Sampling rounds per expression-tag pair.
    pub rounds: usize,
    /// Resampling budget per round before the pair is given up.
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            rounds: 2,
            max_attempts: 64,
        }
    }
}

#[derive(Debug, Default)]
pub struct Generation {
    pub pairs: Vec<SupervisedPair>,
    /// Lexicon entries that produced nothing, with the reason.
    pub skipped: Vec<(ExpressionTagPair, String)>,
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

/// Parses `expression<TAB>key=value` lines.
pub fn parse_lexicon(text: &str) -> Result<Vec<ExpressionTagPair>, CorpusError> {
    content_lines(text)
        .map(|(line, l)| {
            let err = |msg: &str| CorpusError::Parse {
                line,
                msg: msg.to_string(),
            };
            let (expr, tag) = l.split_once('\t').ok_or_else(|| err("expected expression<TAB>key=value"))?;
            let (key, value) = tag.split_once('=').ok_or_else(|| err("tag must be key=value"))?;
            let (expr, key, value) = (expr.trim(), key.trim(), value.trim());
            if expr.is_empty() || key.is_empty() || value.is_empty() {
                return Err(err("empty expression, key or value"));
            }
            if key.contains(char::is_whitespace) || key.contains('@') {
                return Err(err("key must be a single symbol"));
            }
            Ok(ExpressionTagPair {
                expression: expr.to_string(),
                key: key.to_string(),
                value: value.to_string(),
            })
        })
        .collect()
}

/// Parses `structure<TAB>qtype<TAB>question<TAB>query` lines.
pub fn parse_templates(text: &str) -> Result<Vec<Template>, CorpusError> {
    content_lines(text)
        .map(|(line, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 || f.iter().any(|s| s.trim().is_empty()) {
                return Err(CorpusError::Parse {
                    line,
                    msg: "expected structure<TAB>qtype<TAB>question<TAB>query".into(),
                });
            }
            if !QTYPES.contains(&f[1]) {
                return Err(CorpusError::Parse {
                    line,
                    msg: format!("unknown qtype `{}`", f[1]),
                });
            }
            Ok(Template {
                structure: f[0].to_string(),
                qtype: f[1].to_string(),
                question: f[2].to_string(),
                query: f[3].to_string(),
            })
        })
        .collect()
}

/// Splits a question into tokens; sentence punctuation becomes its own token.
pub fn tokenize_question(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let trimmed = word.trim_end_matches(['?', '!', '.', ',']);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        for c in word[trimmed.len()..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

struct Fill<'a> {
    expr: &'a str,
    tag: &'a ExpressionTagPair,
    loc: &'a str,
    poi: Option<&'a str>,
    key: Option<&'a str>,
    walking: bool,
    dir: &'a str,
}

impl Fill<'_> {
    fn question(&self, t: &Template) -> String {
        let mut q = t.question.replace("$EXPR", self.expr).replace("$LOC", self.loc);
        q = q.replace("$DIST", if self.walking { " in walking distance" } else { "" });
        q = q.replace("$DIR", self.dir);
        if let Some(p) = self.poi {
            q = q.replace("$POI", p);
        }
        if let Some(k) = self.key {
            q = q.replace("$KEY", &k.replace('_', " "));
        }
        q
    }

    fn query(&self, t: &Template) -> String {
        let tag = format!("{}@0 {}@s", self.tag.key, escape_value(&self.tag.value));
        let dist = if self.walking { WALKING_DIST } else { DIST_INTOWN };
        let mut q = t
            .query
            .replace("$TAG", &tag)
            .replace("$LOC", &format!("{}@s", escape_value(self.loc)))
            .replace("$DIST", &format!("{dist}@0"))
            .replace("$DIR", &format!("{}@2", self.dir));
        if let Some(p) = self.poi {
            q = q.replace("$POI", &format!("{}@s", escape_value(p)));
        }
        // placeholder stand-in while the key is not yet known
        q.replace("$KEY", &format!("{}@0", self.key.unwrap_or("name")))
    }
}

/// Generates question-query pairs for every lexicon entry.
pub fn generate_pairs(
    lexicon: &[ExpressionTagPair],
    templates: &[Template],
    db: &GeoDatabase,
    config: &GenConfig,
    seed: u64,
) -> Result<Generation, CorpusError> {
    if lexicon.is_empty() {
        return Err(CorpusError::EmptyLexicon);
    }
    let table = LanguageTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Generation::default();
    let qtypes: Vec<&str> = QTYPES
        .iter()
        .copied()
        .filter(|q| templates.iter().any(|t| t.qtype == *q))
        .collect();
    if qtypes.is_empty() {
        return Err(CorpusError::Unfillable("no templates".into()));
    }

    for entry in lexicon {
        let cities: Vec<&str> = db
            .areas()
            .iter()
            .filter(|a| db.objects_in(a).any(|o| o.has_tag(&entry.key, &entry.value)))
            .map(|a| a.name.as_str())
            .collect();
        if cities.is_empty() {
            let err = CorpusError::NoMatchingObjects(format!("{}={}", entry.key, entry.value));
            log::warn!("skipping `{}`: {err}", entry.expression);
            out.skipped.push((entry.clone(), err.to_string()));
            continue;
        }
        for _ in 0..config.rounds {
            match sample_one(entry, &cities, templates, &qtypes, db, &table, config, &mut rng)? {
                Some(pair) => out.pairs.push(pair),
                None => {
                    let err = CorpusError::Unfillable(entry.expression.clone());
                    log::warn!("{err}");
                    out.skipped.push((entry.clone(), err.to_string()));
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn sample_one(
    entry: &ExpressionTagPair,
    cities: &[&str],
    templates: &[Template],
    qtypes: &[&str],
    db: &GeoDatabase,
    table: &LanguageTable,
    config: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<SupervisedPair>, CorpusError> {
    for _ in 0..config.max_attempts {
        let loc = *cities.choose(rng).expect("non-empty");
        let area = db.area(loc).expect("city is an area");
        let named: Vec<&str> = db.objects_in(area).filter_map(|o| o.name()).collect::<BTreeSet<_>>().into_iter().collect();
        let poi = named.choose(rng).copied();
        let qtype = *qtypes.choose(rng).expect("non-empty");
        let candidates: Vec<&Template> = templates.iter().filter(|t| t.qtype == qtype).collect();
        let template = *candidates.choose(rng).expect("qtype has templates");
        let walking = rng.gen_bool(0.5);
        let dir = *DIRECTIONS.choose(rng).expect("non-empty");
        if template.uses("$POI") && poi.is_none() {
            continue;
        }
        let mut fill = Fill {
            expr: &entry.expression,
            tag: entry,
            loc,
            poi,
            key: None,
            walking,
            dir,
        };
        let probe = delinearize(&LinearQuery::parse(&fill.query(template))?)?;
        let Ok(selected) = db.select(&probe) else { continue };
        if selected.is_empty() {
            continue;
        }
        let keys: Vec<String>;
        if template.uses("$KEY") {
            keys = selected
                .iter()
                .flat_map(|o| o.tags.keys().cloned())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            fill.key = keys.choose(rng).map(String::as_str);
        }
        let query = LinearQuery::parse(&fill.query(template))?;
        let tree = crate::mrl::parse_valid(table, &query)?;
        match db.execute(&tree) {
            Ok(answer) if !answer.is_empty() => {
                return Ok(Some(SupervisedPair {
                    question: tokenize_question(&fill.question(template)),
                    query,
                }))
            }
            _ => continue,
        }
    }
    Ok(None)
}

/// Removes repeated (question, query) pairs, keeping first occurrences.
pub fn dedup_pairs(pairs: Vec<SupervisedPair>) -> Vec<SupervisedPair> {
    let mut seen = HashSet::new();
    pairs.into_iter().filter(|p| seen.insert(p.clone())).collect()
}

/// The four disjoint data sets.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub sup: Vec<SupervisedPair>,
    pub dev: Vec<SupervisedPair>,
    pub test: Vec<SupervisedPair>,
    /// Everything not drawn into the other three.
    pub log: Vec<SupervisedPair>,
}

/// Shuffles with `seed` and cuts off supervised, dev and test sets; the rest
/// becomes the log questions.
pub fn split_dataset(
    mut pairs: Vec<SupervisedPair>,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<Splits, CorpusError> {
    let wanted = sizes.0 + sizes.1 + sizes.2;
    if wanted > pairs.len() {
        return Err(CorpusError::InsufficientData {
            wanted,
            available: pairs.len(),
        });
    }
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = pairs.split_off(0);
    let sup: Vec<_> = rest.drain(..sizes.0).collect();
    let dev: Vec<_> = rest.drain(..sizes.1).collect();
    let test: Vec<_> = rest.drain(..sizes.2).collect();
    Ok(Splits {
        sup,
        dev,
        test,
        log: rest,
    })
}

/// Split sizes scaled from the 2,000 / 1,843 / 2,000 reference configuration.
pub fn scaled_split_sizes(divisor: usize) -> (usize, usize, usize) {
    (2000 / divisor, 1843 / divisor, 2000 / divisor)
}

pub fn format_corpus(pairs: &[SupervisedPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\n", p.question_text(), p.query))
        .collect()
}

/// Parses `question<TAB>linear-query` lines.
pub fn parse_corpus(text: &str) -> Result<Vec<SupervisedPair>, CorpusError> {
    content_lines(text)
        .map(|(line, l)| {
            let (q, query) = l.split_once('\t').ok_or_else(|| CorpusError::Parse {
                line,
                msg: "expected question<TAB>linear-query".into(),
            })?;
            let query = LinearQuery::parse(query).map_err(|e| CorpusError::Parse {
                line,
                msg: e.to_string(),
            })?;
            let question: Vec<String> = q.split_whitespace().map(str::to_string).collect();
            if question.is_empty() || query.is_empty() {
                return Err(CorpusError::Parse {
                    line,
                    msg: "empty question or query".into(),
                });
            }
            Ok(SupervisedPair { question, query })
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<SupervisedPair>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

pub fn write_corpus(path: &Path, pairs: &[SupervisedPair]) -> Result<(), CorpusError> {
    std::fs::write(path, format_corpus(pairs)).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Distinct `key=value` tags used by `keyval` nodes outside `name` lookups.
pub fn distinct_tags(pairs: &[SupervisedPair]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for p in pairs {
        let toks = p.query.tokens();
        for w in toks.windows(3) {
            if w[0].surface() == "keyval" && w[1].surface() != "name" {
                out.insert(format!("{}={}", w[1].surface(), crate::mrl::unescape_value(w[2].surface())));
            }
        }
    }
    out
}

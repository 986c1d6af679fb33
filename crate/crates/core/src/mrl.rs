//! The machine-readable query language.
//!
//! Queries exist in two forms. A [`QueryTree`] is the nested operator form,
//! e.g. `query(area(keyval('name','Paris')),nwr(keyval('tourism','hotel')),qtype(count))`.
//! A [`LinearQuery`] is its pre-order serialization where every token carries
//! its arity (`name@k`) or a string-leaf marker (`name@s`):
//!
//! ```text
//! query@3 area@1 keyval@2 name@0 Paris@s nwr@1 keyval@2 tourism@0 hotel@s qtype@1 count@0
//! ```
//!
//! Arities are checked against a [`LanguageTable`] loaded from a text file.
//! Whitespace inside string leaves is written as `€` in the linear form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Separator standing in for a space inside a string leaf.
pub const SPACE_ESCAPE: char = '€';

/// Nesting limit for trees built from untrusted token sequences.
pub const MAX_DEPTH: usize = 256;

/// The language table shipped with the crate.
pub const DEFAULT_LANGUAGE: &str = include_str!("../data/language.tsv");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MrlError {
    #[error("invalid token `{0}`")]
    InvalidToken(String),
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("language table line {line}: {msg}")]
    Table { line: usize, msg: String },
}

/// Arity annotation of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Marker {
    Arity(usize),
    /// String leaf (OSM value, place name, ...).
    Str,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token {
    surface: String,
    marker: Marker,
}

impl Token {
    pub fn new(surface: impl Into<String>, marker: Marker) -> Result<Self, MrlError> {
        let surface = surface.into();
        if surface.is_empty() || surface.chars().any(char::is_whitespace) {
            return Err(MrlError::InvalidToken(surface));
        }
        Ok(Token { surface, marker })
    }

    /// A string-leaf token for a raw value; spaces are escaped.
    pub fn value(raw: &str) -> Result<Self, MrlError> {
        Token::new(escape_value(raw), Marker::Str)
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn marker(&self) -> Marker {
        self.marker
    }

    /// Number of children this token consumes in pre-order.
    pub fn arity(&self) -> usize {
        match self.marker {
            Marker::Arity(k) => k,
            Marker::Str => 0,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.marker {
            Marker::Arity(k) => write!(f, "{}@{}", self.surface, k),
            Marker::Str => write!(f, "{}@s", self.surface),
        }
    }
}

impl FromStr for Token {
    type Err = MrlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (surface, marker) = s
            .rsplit_once('@')
            .ok_or_else(|| MrlError::InvalidToken(s.to_string()))?;
        let marker = match marker {
            "s" => Marker::Str,
            digits if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) => {
                Marker::Arity(
                    digits
                        .parse()
                        .map_err(|_| MrlError::InvalidToken(s.to_string()))?,
                )
            }
            _ => return Err(MrlError::InvalidToken(s.to_string())),
        };
        Token::new(surface, marker).map_err(|_| MrlError::InvalidToken(s.to_string()))
    }
}

pub fn escape_value(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(&SPACE_ESCAPE.to_string())
}

pub fn unescape_value(surface: &str) -> String {
    surface.replace(SPACE_ESCAPE, " ")
}

/// Arity-annotated pre-order token sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinearQuery {
    tokens: Vec<Token>,
}

impl LinearQuery {
    pub fn new(tokens: Vec<Token>) -> Self {
        LinearQuery { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token strings in order, e.g. `["qtype@1", "count@0"]`.
    pub fn token_strings(&self) -> Vec<String> {
        self.tokens.iter().map(Token::to_string).collect()
    }

    /// Parses whitespace-separated tokens. Does not check tree structure.
    pub fn parse(text: &str) -> Result<Self, MrlError> {
        text.split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()
            .map(LinearQuery::new)
    }
}

impl fmt::Display for LinearQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for LinearQuery {
    type Err = MrlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LinearQuery::parse(s)
    }
}

impl serde::Serialize for LinearQuery {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for LinearQuery {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LinearQuery::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A query in tree form.
///
/// OSM keys such as `name` are operator nodes without children; OSM values
/// are [`QueryTree::Value`] leaves holding the unescaped string.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum QueryTree {
    Node { op: String, children: Vec<QueryTree> },
    Value(String),
}

impl QueryTree {
    pub fn node(op: impl Into<String>, children: Vec<QueryTree>) -> Self {
        QueryTree::Node {
            op: op.into(),
            children,
        }
    }

    pub fn leaf(op: impl Into<String>) -> Self {
        QueryTree::node(op, Vec::new())
    }

    pub fn value(v: impl Into<String>) -> Self {
        QueryTree::Value(v.into())
    }

    /// `keyval(key, value)`
    pub fn keyval(key: &str, value: &str) -> Self {
        QueryTree::node("keyval", vec![QueryTree::leaf(key), QueryTree::value(value)])
    }

    pub fn op(&self) -> Option<&str> {
        match self {
            QueryTree::Node { op, .. } => Some(op),
            QueryTree::Value(_) => None,
        }
    }

    pub fn children(&self) -> &[QueryTree] {
        match self {
            QueryTree::Node { children, .. } => children,
            QueryTree::Value(_) => &[],
        }
    }

    pub fn child_with_op(&self, name: &str) -> Option<&QueryTree> {
        self.children().iter().find(|c| c.op() == Some(name))
    }

    /// Number of tokens in the linear form of this subtree.
    pub fn size(&self) -> usize {
        1 + self.children().iter().map(QueryTree::size).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self
            .children()
            .iter()
            .map(QueryTree::depth)
            .max()
            .unwrap_or(0)
    }

    /// Visits every node in pre-order together with its token index in the
    /// linear form.
    pub fn visit_preorder<'a>(&'a self, f: &mut impl FnMut(usize, &'a QueryTree)) {
        fn go<'a>(t: &'a QueryTree, next: &mut usize, f: &mut impl FnMut(usize, &'a QueryTree)) {
            f(*next, t);
            *next += 1;
            for c in t.children() {
                go(c, next, f);
            }
        }
        let mut next = 0;
        go(self, &mut next, f);
    }

    /// Renders the nested form, e.g. `qtype(count)`.
    pub fn to_nested(&self) -> String {
        match self {
            QueryTree::Value(v) => format!("'{v}'"),
            QueryTree::Node { op, children } if children.is_empty() => op.clone(),
            QueryTree::Node { op, children } => {
                let inner: Vec<_> = children.iter().map(QueryTree::to_nested).collect();
                format!("{op}({})", inner.join(","))
            }
        }
    }

    fn tokens_into(&self, out: &mut Vec<Token>) -> Result<(), MrlError> {
        match self {
            QueryTree::Value(v) => {
                out.push(Token::value(v).map_err(|_| MrlError::InvalidTree(format!("empty value `{v}`")))?)
            }
            QueryTree::Node { op, children } => {
                out.push(
                    Token::new(op.clone(), Marker::Arity(children.len()))
                        .map_err(|_| MrlError::InvalidTree(format!("bad operator `{op}`")))?,
                );
                for c in children {
                    c.tokens_into(out)?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for QueryTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_nested())
    }
}

/// Declared operators and the arities each admits.
///
/// File format: one operator per line, `name<TAB>arity`, where `arity` may be a
/// comma-separated list for operators with optional arguments. Lines starting
/// with `#` are comments; `# version: N` records the table version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageTable {
    version: Option<String>,
    arities: BTreeMap<String, BTreeSet<usize>>,
}

impl LanguageTable {
    pub fn parse(text: &str) -> Result<Self, MrlError> {
        let mut version = None;
        let mut arities = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version:") {
                    version = Some(v.trim().to_string());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| MrlError::Table {
                line: line_no,
                msg: msg.to_string(),
            };
            let (name, arity) = line.split_once('\t').ok_or_else(|| err("expected name<TAB>arity"))?;
            if name.is_empty() || name.contains(char::is_whitespace) || name.contains('@') {
                return Err(err("invalid operator name"));
            }
            let set = arity
                .split(',')
                .map(|a| a.trim().parse::<usize>().map_err(|_| err("arity is not an integer")))
                .collect::<Result<BTreeSet<_>, _>>()?;
            if arities.insert(name.to_string(), set).is_some() {
                return Err(err("duplicate operator"));
            }
        }
        Ok(LanguageTable { version, arities })
    }

    pub fn version(&self) -> Option<&str> {
        self.version.as_deref()
    }

    pub fn is_operator(&self, name: &str) -> bool {
        self.arities.contains_key(name)
    }

    pub fn arities(&self, name: &str) -> Option<&BTreeSet<usize>> {
        self.arities.get(name)
    }

    pub fn operators(&self) -> impl Iterator<Item = (&str, &BTreeSet<usize>)> {
        self.arities.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Checks every node against the table: declared operators must use a
    /// declared arity, and undeclared symbols may only appear as leaves.
    pub fn check_tree(&self, tree: &QueryTree) -> Result<(), MrlError> {
        let mut stack = vec![tree];
        while let Some(t) = stack.pop() {
            if let QueryTree::Node { op, children } = t {
                match self.arities.get(op) {
                    Some(set) if !set.contains(&children.len()) => {
                        return Err(MrlError::InvalidTree(format!(
                            "`{op}` has {} children, table allows {:?}",
                            children.len(),
                            set
                        )))
                    }
                    None if !children.is_empty() => {
                        return Err(MrlError::InvalidTree(format!("undeclared operator `{op}` has children")))
                    }
                    _ => {}
                }
                stack.extend(children.iter());
            }
        }
        Ok(())
    }

    /// Root invariants: the root is `query` and exactly one child is `qtype`.
    pub fn check_root(&self, tree: &QueryTree) -> Result<(), MrlError> {
        if tree.op() != Some("query") {
            return Err(MrlError::InvalidTree("root operator must be `query`".into()));
        }
        let qtypes = tree.children().iter().filter(|c| c.op() == Some("qtype")).count();
        if qtypes != 1 {
            return Err(MrlError::InvalidTree(format!("expected one `qtype` child, found {qtypes}")));
        }
        Ok(())
    }
}

impl Default for LanguageTable {
    fn default() -> Self {
        LanguageTable::parse(DEFAULT_LANGUAGE).expect("bundled language table parses")
    }
}

/// Pre-order serialization of a valid tree.
pub fn linearize(table: &LanguageTable, tree: &QueryTree) -> Result<LinearQuery, MrlError> {
    table.check_tree(tree)?;
    table.check_root(tree)?;
    let mut tokens = Vec::with_capacity(tree.size());
    tree.tokens_into(&mut tokens)?;
    Ok(LinearQuery::new(tokens))
}

/// Pre-order serialization without language-table checks (used for subtrees).
pub fn linearize_unchecked(tree: &QueryTree) -> Result<LinearQuery, MrlError> {
    let mut tokens = Vec::with_capacity(tree.size());
    tree.tokens_into(&mut tokens)?;
    Ok(LinearQuery::new(tokens))
}

/// Rebuilds the unique tree whose pre-order serialization is `q`.
///
/// Fails when the arity markers do not consume the sequence exactly.
pub fn delinearize(q: &LinearQuery) -> Result<QueryTree, MrlError> {
    struct Frame {
        op: String,
        want: usize,
        children: Vec<QueryTree>,
    }

    let tokens = q.tokens();
    if tokens.is_empty() {
        return Err(MrlError::MalformedQuery("empty token sequence".into()));
    }
    let mut stack: Vec<Frame> = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        let mut done = match tok.marker() {
            Marker::Str => QueryTree::Value(unescape_value(tok.surface())),
            Marker::Arity(0) => QueryTree::leaf(tok.surface()),
            Marker::Arity(k) => {
                if stack.len() >= MAX_DEPTH {
                    return Err(MrlError::MalformedQuery(format!("nesting deeper than {MAX_DEPTH}")));
                }
                stack.push(Frame {
                    op: tok.surface().to_string(),
                    want: k,
                    children: Vec::with_capacity(k.min(16)),
                });
                continue;
            }
        };
        loop {
            match stack.last_mut() {
                None => {
                    if i + 1 != tokens.len() {
                        return Err(MrlError::MalformedQuery(format!(
                            "{} trailing tokens after complete tree",
                            tokens.len() - i - 1
                        )));
                    }
                    return Ok(done);
                }
                Some(top) => {
                    top.children.push(done);
                    if top.children.len() < top.want {
                        break;
                    }
                    let f = stack.pop().expect("non-empty");
                    done = QueryTree::Node {
                        op: f.op,
                        children: f.children,
                    };
                }
            }
        }
    }
    Err(MrlError::MalformedQuery(format!(
        "sequence ended with {} unfinished operators",
        stack.len()
    )))
}

/// True iff `q` delinearizes, satisfies the language table, and has a valid root.
pub fn validate(table: &LanguageTable, q: &LinearQuery) -> bool {
    parse_valid(table, q).is_ok()
}

/// Delinearizes and runs every table and root check.
pub fn parse_valid(table: &LanguageTable, q: &LinearQuery) -> Result<QueryTree, MrlError> {
    let tree = delinearize(q)?;
    table.check_tree(&tree)?;
    table.check_root(&tree)?;
    Ok(tree)
}

/// Sum of `arity - 1` over all tokens; `-1` for every well-formed sequence.
pub fn arity_balance(q: &LinearQuery) -> i64 {
    q.tokens().iter().map(|t| t.arity() as i64 - 1).sum()
}

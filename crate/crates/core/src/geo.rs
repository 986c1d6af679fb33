//! A small in-memory geographic database and an interpreter for query trees.
//!
//! Objects file: `id<TAB>lat<TAB>lon<TAB>key=value;key=value;...`.
//! Areas file: `name<TAB>lat<TAB>lon<TAB>radius_m`; an area is a circle.
//! Lines starting with `#` and blank lines are ignored in both.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use thiserror::Error;

use crate::mrl::QueryTree;

pub const DEFAULT_OBJECTS: &str = include_str!("../data/toy_db.tsv");
pub const DEFAULT_AREAS: &str = include_str!("../data/cities.tsv");

/// Symbolic radius names used as `maxdist` arguments.
pub const WALKING_DIST: &str = "WALKING_DIST";
pub const DIST_INTOWN: &str = "DIST_INTOWN";

const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecutionError {
    #[error("unknown area `{0}`")]
    UnknownArea(String),
    #[error("no object named `{0}` in the area")]
    UnknownCenter(String),
    #[error("unsupported query shape: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoObject {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub tags: BTreeMap<String, String>,
}

impl GeoObject {
    pub fn has_tag(&self, key: &str, value: &str) -> bool {
        self.tags.get(key).is_some_and(|v| v == value)
    }

    pub fn name(&self) -> Option<&str> {
        self.tags.get("name").map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Area {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub radius_m: f64,
}

impl Area {
    pub fn contains(&self, o: &GeoObject) -> bool {
        haversine_m(self.lat, self.lon, o.lat, o.lon) <= self.radius_m
    }
}

/// Radii for the fuzzy distance operators.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExecConfig {
    pub walking_m: f64,
    pub in_town_m: f64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            walking_m: 1000.0,
            in_town_m: 5000.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GeoDatabase {
    objects: Vec<GeoObject>,
    areas: Vec<Area>,
    config: ExecConfig,
}

/// Great-circle distance in meters.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

fn parse_coord(field: &str, lo: f64, hi: f64, line: usize, what: &str) -> Result<f64, GeoError> {
    let v: f64 = field.trim().parse().map_err(|_| GeoError::Parse {
        line,
        msg: format!("{what} `{field}` is not a number"),
    })?;
    if !(lo..=hi).contains(&v) {
        return Err(GeoError::Parse {
            line,
            msg: format!("{what} {v} out of range"),
        });
    }
    Ok(v)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

pub fn parse_objects(text: &str) -> Result<Vec<GeoObject>, GeoError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 4 {
            return Err(GeoError::Parse {
                line,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let id: u64 = fields[0].trim().parse().map_err(|_| GeoError::Parse {
            line,
            msg: format!("bad id `{}`", fields[0]),
        })?;
        if !seen.insert(id) {
            return Err(GeoError::Parse {
                line,
                msg: format!("duplicate id {id}"),
            });
        }
        let lat = parse_coord(fields[1], -90.0, 90.0, line, "latitude")?;
        let lon = parse_coord(fields[2], -180.0, 180.0, line, "longitude")?;
        let mut tags = BTreeMap::new();
        for kv in fields[3].split(';').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| GeoError::Parse {
                line,
                msg: format!("malformed tag `{kv}`"),
            })?;
            if k.is_empty() || v.is_empty() {
                return Err(GeoError::Parse {
                    line,
                    msg: format!("empty key or value in `{kv}`"),
                });
            }
            if tags.insert(k.to_string(), v.to_string()).is_some() {
                return Err(GeoError::Parse {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        out.push(GeoObject { id, lat, lon, tags });
    }
    Ok(out)
}

pub fn parse_areas(text: &str) -> Result<Vec<Area>, GeoError> {
    let mut names = HashSet::new();
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 4 || fields[0].trim().is_empty() {
            return Err(GeoError::Parse {
                line,
                msg: "expected name<TAB>lat<TAB>lon<TAB>radius_m".into(),
            });
        }
        let name = fields[0].trim().to_string();
        if !names.insert(name.clone()) {
            return Err(GeoError::Parse {
                line,
                msg: format!("duplicate area `{name}`"),
            });
        }
        let lat = parse_coord(fields[1], -90.0, 90.0, line, "latitude")?;
        let lon = parse_coord(fields[2], -180.0, 180.0, line, "longitude")?;
        let radius_m = parse_coord(fields[3], 0.0, 20_000_000.0, line, "radius")?;
        out.push(Area {
            name,
            lat,
            lon,
            radius_m,
        });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, GeoError> {
    std::fs::read_to_string(path).map_err(|source| GeoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an objects file (no areas).
pub fn load_db(path: &Path) -> Result<GeoDatabase, GeoError> {
    Ok(GeoDatabase::new(parse_objects(&read(path)?)?, Vec::new()))
}

/// The aggregated result of executing a query.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum AnswerSet {
    Count(usize),
    Names(BTreeSet<String>),
    Boolean(bool),
    KeyValues(BTreeSet<String>),
    Coordinates(BTreeSet<String>),
}

impl AnswerSet {
    /// Answer string used for evaluation; empty lists render as `""`.
    pub fn render(&self) -> String {
        match self {
            AnswerSet::Count(n) => n.to_string(),
            AnswerSet::Boolean(b) => if *b { "yes" } else { "no" }.to_string(),
            AnswerSet::Names(s) | AnswerSet::KeyValues(s) | AnswerSet::Coordinates(s) => {
                s.iter().cloned().collect::<Vec<_>>().join(", ")
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            AnswerSet::Count(_) | AnswerSet::Boolean(_) => false,
            AnswerSet::Names(s) | AnswerSet::KeyValues(s) | AnswerSet::Coordinates(s) => s.is_empty(),
        }
    }
}

impl GeoDatabase {
    pub fn new(objects: Vec<GeoObject>, areas: Vec<Area>) -> Self {
        GeoDatabase {
            objects,
            areas,
            config: ExecConfig::default(),
        }
    }

    pub fn load(objects: &Path, areas: &Path) -> Result<Self, GeoError> {
        Ok(GeoDatabase::new(
            parse_objects(&read(objects)?)?,
            parse_areas(&read(areas)?)?,
        ))
    }

    /// The bundled toy database.
    pub fn bundled() -> Self {
        GeoDatabase::new(
            parse_objects(DEFAULT_OBJECTS).expect("bundled objects parse"),
            parse_areas(DEFAULT_AREAS).expect("bundled areas parse"),
        )
    }

    pub fn with_config(mut self, config: ExecConfig) -> Self {
        self.config = config;
        self
    }

    pub fn config(&self) -> &ExecConfig {
        &self.config
    }

    pub fn objects(&self) -> &[GeoObject] {
        &self.objects
    }

    pub fn areas(&self) -> &[Area] {
        &self.areas
    }

    pub fn push_object(&mut self, o: GeoObject) {
        self.objects.push(o);
    }

    pub fn area(&self, name: &str) -> Option<&Area> {
        self.areas.iter().find(|a| a.name == name)
    }

    pub fn objects_in<'a>(&'a self, area: &'a Area) -> impl Iterator<Item = &'a GeoObject> + 'a {
        self.objects.iter().filter(move |o| area.contains(o))
    }

    pub fn radius_for(&self, symbol: &str) -> Option<f64> {
        match symbol {
            WALKING_DIST => Some(self.config.walking_m),
            DIST_INTOWN => Some(self.config.in_town_m),
            _ => None,
        }
    }

    /// Executes a query tree.
    pub fn execute(&self, tree: &QueryTree) -> Result<AnswerSet, ExecutionError> {
        let (qtype, matches) = self.select_with_qtype(tree)?;
        answer(qtype, &matches)
    }

    /// Objects selected by the query's filters, ignoring its question type.
    pub fn select(&self, tree: &QueryTree) -> Result<Vec<&GeoObject>, ExecutionError> {
        self.select_with_qtype(tree).map(|(_, m)| m)
    }

    fn select_with_qtype<'t>(
        &self,
        tree: &'t QueryTree,
    ) -> Result<(&'t QueryTree, Vec<&GeoObject>), ExecutionError> {
        if tree.op() != Some("query") {
            return Err(unsupported("root is not `query`"));
        }
        let (qtype, filters): (Vec<&QueryTree>, Vec<&QueryTree>) =
            tree.children().iter().partition(|c| c.op() == Some("qtype"));
        let [qtype] = qtype[..] else {
            return Err(unsupported("expected exactly one qtype"));
        };
        let matches = match filters[..] {
            [single] => self.eval_set(single)?,
            [area, nwr] if area.op() == Some("area") && nwr.op() == Some("nwr") => {
                let area = self.eval_area(area)?;
                let (k, v) = tag_of(nwr)?;
                self.objects_in(area).filter(|o| o.has_tag(k, v)).collect()
            }
            _ => return Err(unsupported("unrecognized filter arguments")),
        };
        Ok((qtype, matches))
    }

    fn eval_area(&self, node: &QueryTree) -> Result<&Area, ExecutionError> {
        match node.children() {
            [kv] if node.op() == Some("area") => {
                let (k, v) = keyval(kv)?;
                if k != "name" {
                    return Err(unsupported("area must be selected by name"));
                }
                self.area(v).ok_or_else(|| ExecutionError::UnknownArea(v.to_string()))
            }
            _ => Err(unsupported("expected area(keyval(name, ..))")),
        }
    }

    fn eval_set(&self, node: &QueryTree) -> Result<Vec<&GeoObject>, ExecutionError> {
        let op = node.op().unwrap_or("");
        match (op, node.children()) {
            ("north" | "south" | "east" | "west", [area, nwr]) => {
                let area = self.eval_area(area)?;
                let (k, v) = tag_of(nwr)?;
                Ok(self
                    .objects_in(area)
                    .filter(|o| o.has_tag(k, v))
                    .filter(|o| match op {
                        "north" => o.lat > area.lat,
                        "south" => o.lat < area.lat,
                        "east" => o.lon > area.lon,
                        _ => o.lon < area.lon,
                    })
                    .collect())
            }
            ("around", [center, search, maxdist, rest @ ..]) if rest.len() <= 1 => {
                let center = self.eval_center(center)?;
                let search = match search.children() {
                    [nwr] if search.op() == Some("search") => tag_of(nwr)?,
                    _ => return Err(unsupported("expected search(nwr(..))")),
                };
                let radius = match maxdist.children() {
                    [QueryTree::Node { op, children }] if maxdist.op() == Some("maxdist") && children.is_empty() => {
                        self.radius_for(op).ok_or_else(|| unsupported("unknown maxdist"))?
                    }
                    _ => return Err(unsupported("expected maxdist(SYMBOL)")),
                };
                let mut hits: Vec<(f64, &GeoObject)> = self
                    .objects
                    .iter()
                    .filter(|o| o.id != center.id && o.has_tag(search.0, search.1))
                    .map(|o| (haversine_m(center.lat, center.lon, o.lat, o.lon), o))
                    .filter(|(d, _)| *d <= radius)
                    .collect();
                if let [topx] = rest {
                    let k = match topx.children() {
                        [QueryTree::Value(v)] if topx.op() == Some("topx") => {
                            v.parse::<usize>().map_err(|_| unsupported("topx needs an integer"))?
                        }
                        _ => return Err(unsupported("expected topx('k')")),
                    };
                    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
                    hits.truncate(k);
                }
                Ok(hits.into_iter().map(|(_, o)| o).collect())
            }
            _ => Err(unsupported(&format!("unsupported operator `{op}`"))),
        }
    }

    fn eval_center(&self, node: &QueryTree) -> Result<&GeoObject, ExecutionError> {
        match node.children() {
            [area, nwr] if node.op() == Some("center") => {
                let area = self.eval_area(area)?;
                let (k, v) = tag_of(nwr)?;
                self.objects_in(area)
                    .filter(|o| o.has_tag(k, v))
                    .min_by_key(|o| o.id)
                    .ok_or_else(|| ExecutionError::UnknownCenter(v.to_string()))
            }
            _ => Err(unsupported("expected center(area, nwr)")),
        }
    }
}

fn unsupported(msg: &str) -> ExecutionError {
    ExecutionError::Unsupported(msg.to_string())
}

fn keyval(node: &QueryTree) -> Result<(&str, &str), ExecutionError> {
    match node.children() {
        [QueryTree::Node { op: k, children }, QueryTree::Value(v)] if node.op() == Some("keyval") && children.is_empty() => {
            Ok((k, v))
        }
        _ => Err(unsupported("expected keyval(key, 'value')")),
    }
}

fn tag_of(nwr: &QueryTree) -> Result<(&str, &str), ExecutionError> {
    match nwr.children() {
        [kv] if nwr.op() == Some("nwr") => keyval(kv),
        _ => Err(unsupported("expected nwr(keyval(..))")),
    }
}

fn answer(qtype: &QueryTree, matches: &[&GeoObject]) -> Result<AnswerSet, ExecutionError> {
    let [arg] = qtype.children() else {
        return Err(unsupported("qtype takes one argument"));
    };
    match (arg.op(), arg.children()) {
        (Some("count"), []) => Ok(AnswerSet::Count(matches.len())),
        (Some("exist"), []) => Ok(AnswerSet::Boolean(!matches.is_empty())),
        (Some("latlong"), []) => Ok(AnswerSet::Coordinates(
            matches.iter().map(|o| format!("{:.6} {:.6}", o.lat, o.lon)).collect(),
        )),
        (Some("findkey"), [QueryTree::Node { op: key, children }]) if children.is_empty() => {
            let values = matches.iter().filter_map(|o| o.tags.get(key).cloned()).collect();
            Ok(if key == "name" {
                AnswerSet::Names(values)
            } else {
                AnswerSet::KeyValues(values)
            })
        }
        _ => Err(unsupported("unknown question type")),
    }
}

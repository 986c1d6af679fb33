// Fuzz bodies for the core parsers. Shared by the cargo-fuzz targets and by
// the seed-corpus tests in crates/core/tests/fuzz_seeds.rs.

use std::sync::OnceLock;

use cfparse_core::bandit::{format_logging_run, parse_logging_run};
use cfparse_core::cflearn::{format_log, parse_log};
use cfparse_core::corpus::{format_corpus, parse_corpus, parse_lexicon, parse_templates};
use cfparse_core::feedback::{generate_statements, Descriptions};
use cfparse_core::geo::{parse_areas, parse_objects, GeoDatabase};
use cfparse_core::mrl::{delinearize, linearize_unchecked, LanguageTable, LinearQuery};
use cfparse_core::policy::Policy;
use cfparse_core::vocab::Vocab;

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

fn db() -> &'static GeoDatabase {
    static DB: OnceLock<GeoDatabase> = OnceLock::new();
    DB.get_or_init(GeoDatabase::bundled)
}

fn descriptions() -> &'static Descriptions {
    static D: OnceLock<Descriptions> = OnceLock::new();
    D.get_or_init(Descriptions::bundled)
}

/// Printing re-parses to the same query; well-formed queries survive the
/// tree round trip, execute without panicking and yield statements.
pub fn linear_query(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let Ok(q) = LinearQuery::parse(s) else { return };
    let again: LinearQuery = q.to_string().parse().expect("printed query parses");
    assert_eq!(again, q);
    if let Ok(tree) = delinearize(&q) {
        assert_eq!(linearize_unchecked(&tree).expect("parsed tree linearizes"), q);
        let _ = db().execute(&tree);
        if let Ok(statements) = generate_statements(&q, descriptions()) {
            for st in statements {
                assert!(st.tokens.iter().all(|&t| t < q.len()));
            }
        }
    }
}

pub fn language_table(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(t) = LanguageTable::parse(s) {
        for (_, arities) in t.operators() {
            assert!(!arities.is_empty());
        }
    }
}

pub fn lexicon(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(entries) = parse_lexicon(s) {
        let printed: String = entries.iter().map(|e| format!("{e}\n")).collect();
        assert_eq!(parse_lexicon(&printed).expect("printed lexicon parses"), entries);
    }
}

pub fn templates(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let _ = parse_templates(s);
}

pub fn corpus(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(pairs) = parse_corpus(s) {
        assert_eq!(parse_corpus(&format_corpus(&pairs)).expect("printed corpus parses"), pairs);
    }
}

pub fn log(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(entries) = parse_log(s) {
        assert_eq!(parse_log(&format_log(&entries)).expect("printed log parses"), entries);
    }
}

pub fn logging_run(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(run) = parse_logging_run(s) {
        let printed = format_logging_run(&run);
        let again = parse_logging_run(&printed).expect("printed run parses");
        assert_eq!(format_logging_run(&again), printed);
    }
}

pub fn geo_objects(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let _ = parse_objects(s);
}

pub fn geo_areas(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let _ = parse_areas(s);
}

pub fn descriptions_file(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(d) = Descriptions::parse(s) {
        let _ = d.tooltip_lookup("amenity", Some("cafe"));
    }
}

pub fn vocab(data: &[u8]) {
    let Some(s) = text(data) else { return };
    if let Ok(v) = Vocab::parse(s) {
        assert_eq!(Vocab::parse(&v.to_file_string()).expect("printed vocab parses"), v);
    }
}

pub fn checkpoint(data: &[u8]) {
    let Some(s) = text(data) else { return };
    let src = Vocab::from_tokens(["a", "b"]);
    let tgt = Vocab::from_tokens(["x@0", "y@1"]);
    if let Ok(p) = Policy::from_checkpoint(s, src.clone(), tgt.clone()) {
        let printed = p.checkpoint_string();
        let again = Policy::from_checkpoint(&printed, src, tgt).expect("printed checkpoint parses");
        assert_eq!(again.checkpoint_string(), printed);
    }
}

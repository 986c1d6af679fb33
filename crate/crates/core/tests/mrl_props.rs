mod common;

use cfparse_core::corpus::{generate_pairs, parse_lexicon, parse_templates, GenConfig, DEFAULT_LEXICON, DEFAULT_TEMPLATES};
use cfparse_core::geo::GeoDatabase;
use cfparse_core::mrl::*;
use proptest::prelude::*;

#[test]
fn ten_thousand_random_trees_round_trip() {
    let table = LanguageTable::default();
    let mut rng = common::rng(2024);
    for i in 0..10_000 {
        let tree = common::random_query_tree(&mut rng, &table);
        let q = linearize(&table, &tree).unwrap_or_else(|e| panic!("tree {i}: {e}"));
        assert_eq!(q.len(), tree.size());
        assert_eq!(arity_balance(&q), -1);
        assert_eq!(delinearize(&q).unwrap(), tree, "tree {i}");
        let text = q.to_string();
        let reparsed: LinearQuery = text.parse().unwrap();
        assert_eq!(reparsed, q);
        assert!(validate(&table, &reparsed));
    }
}

#[test]
fn every_proper_prefix_is_malformed() {
    let table = LanguageTable::default();
    let mut rng = common::rng(5);
    for _ in 0..500 {
        let q = linearize(&table, &common::random_query_tree(&mut rng, &table)).unwrap();
        for cut in 1..q.len() {
            let prefix = LinearQuery::new(q.tokens()[..cut].to_vec());
            assert!(delinearize(&prefix).is_err());
        }
    }
}

/// Every query produced by the generator uses table arities and balances.
#[test]
fn arity_is_conserved_on_generated_corpora() {
    let table = LanguageTable::default();
    let db = GeoDatabase::bundled();
    let lex = parse_lexicon(DEFAULT_LEXICON).unwrap();
    let templates = parse_templates(DEFAULT_TEMPLATES).unwrap();
    let mut total = 0;
    for seed in 1..=3 {
        let cfg = GenConfig {
            rounds: 1500 / lex.len(),
            ..Default::default()
        };
        let g = generate_pairs(&lex, &templates, &db, &cfg, seed).unwrap();
        for p in &g.pairs {
            let q = &p.query;
            assert_eq!(arity_balance(q), -1, "{q}");
            for t in q.tokens() {
                if let Some(set) = table.arities(t.surface()) {
                    assert!(set.contains(&t.arity()), "{t} in {q}");
                } else {
                    assert_eq!(t.arity(), 0, "{t} in {q}");
                }
            }
            // Tokens consumed as children equal tokens minus the root.
            let children: usize = q.tokens().iter().map(|t| t.arity()).sum();
            assert_eq!(children + 1, q.len());
            assert!(validate(&table, q));
        }
        total += g.pairs.len();
    }
    assert!(total > 3000);
}

fn token() -> impl Strategy<Value = Token> {
    (prop::sample::select(vec!["a", "b", "qtype", "Paris"]), prop_oneof![Just(None), (0usize..4).prop_map(Some)])
        .prop_map(|(s, k)| Token::new(s, k.map_or(Marker::Str, Marker::Arity)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    /// Counter oracle: start needing one subtree; each token fills one slot
    /// and opens `arity` more. Well-formed iff the counter first hits zero
    /// exactly at the last token.
    #[test]
    fn delinearize_accepts_exactly_the_balanced_sequences(toks in prop::collection::vec(token(), 0..12)) {
        let mut need: i64 = 1;
        let mut ok = !toks.is_empty();
        for (i, t) in toks.iter().enumerate() {
            need += t.arity() as i64 - 1;
            if need == 0 && i + 1 != toks.len() {
                ok = false;
                break;
            }
        }
        ok &= need == 0;
        let q = LinearQuery::new(toks);
        let back = delinearize(&q);
        prop_assert_eq!(back.is_ok(), ok);
        if let Ok(tree) = back {
            prop_assert_eq!(linearize_unchecked(&tree).unwrap(), q);
        }
    }

    #[test]
    fn values_with_single_spaces_survive(words in prop::collection::vec("[A-Za-z0-9'-]{1,8}", 1..4)) {
        let raw = words.join(" ");
        let tree = QueryTree::node("query", vec![
            QueryTree::node("area", vec![QueryTree::keyval("name", &raw)]),
            QueryTree::node("qtype", vec![QueryTree::leaf("count")]),
        ]);
        let q = linearize_unchecked(&tree).unwrap();
        prop_assert!(!q.to_string().contains(&raw) || words.len() == 1);
        let back = delinearize(&q.to_string().parse().unwrap()).unwrap();
        prop_assert_eq!(back, tree);
    }
}

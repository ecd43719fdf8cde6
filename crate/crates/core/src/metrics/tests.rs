use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;

fn t(s: &str) -> TokenizedCaption {
    tokenize(s)
}

fn refs(xs: &[&str]) -> Vec<TokenizedCaption> {
    xs.iter().map(|s| t(s)).collect()
}

#[test]
fn bleu_identity_is_one() {
    let c = t("a dog barks while rain falls");
    for n in 1..=4 {
        assert!((bleu(&c, std::slice::from_ref(&c), n).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bleu_clips_repeated_unigrams() {
    let b = bleu(&t("the the the"), &refs(&["the cat"]), 1).unwrap();
    assert!((b - 1.0 / 3.0).abs() < 1e-4, "{b}");
}

#[test]
fn bleu_zero_four_gram_overlap_is_zero_without_smoothing() {
    let c = t("a b c d e");
    let r = refs(&["a b c x d e"]);
    assert_eq!(bleu(&c, &r, 4).unwrap(), 0.0);
    let s = corpus_bleu(&[c], &[r], 4, Smoothing::AddEpsilon).unwrap();
    assert!(s > 0.0 && s < 1.0);
}

#[test]
fn bleu_brevity_penalty_uses_shorter_reference_on_tie() {
    // c=4, refs of length 3 and 5 are equally close; the shorter one wins
    // and no penalty applies.
    let c = t("a b c d");
    let r = refs(&["a b c", "a b c d e"]);
    assert!((bleu(&c, &r, 1).unwrap() - 1.0).abs() < 1e-12);
    let c = t("a b");
    let b = bleu(&c, &refs(&["a b c d"]), 1).unwrap();
    assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
}

#[test]
fn bleu_rejects_bad_inputs() {
    assert!(matches!(bleu(&[], &refs(&["a"]), 1), Err(MetricError::Empty)));
    assert!(matches!(bleu(&t("a"), &[], 1), Err(MetricError::Empty)));
    assert!(matches!(bleu(&t("a"), &refs(&["a"]), 0), Err(MetricError::Order(0))));
    assert!(matches!(bleu(&t("a"), &refs(&["a"]), 5), Err(MetricError::Order(5))));
}

#[test]
fn rouge_l_follows_f_measure() {
    let f = rouge_l(&t("a b c d"), &refs(&["a c d"])).unwrap();
    let expected = (1.0 + 1.44) * 0.75 / (1.0 + 1.44 * 0.75);
    assert!((f - expected).abs() < 1e-12);
    assert!((f - 0.87981).abs() < 1e-5, "{f}");
    assert!((rouge_l(&t("x y"), &refs(&["x y"])).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rouge_l(&t("x y"), &refs(&["p q"])).unwrap(), 0.0);
    assert!(rouge_l(&[], &refs(&["a"])).is_err());
}

#[test]
fn cider_single_example_identity_is_ten() {
    let c = vec![t("a dog barks in the rain")];
    let r = vec![refs(&["a dog barks in the rain"])];
    let stats = CorpusStats::from_references(&r);
    let s = cider_d(&c, &r, &stats).unwrap();
    assert!((s.mean - 10.0).abs() < 1e-6);
}

#[test]
fn cider_disjoint_is_zero() {
    let r = vec![refs(&["a dog barks"]), refs(&["rain falls"])];
    let c = vec![t("birds chirp"), t("engine idles")];
    let stats = CorpusStats::from_references(&r);
    let s = cider_d(&c, &r, &stats).unwrap();
    assert_eq!(s.per_example, vec![0.0, 0.0]);
}

#[test]
fn cider_rejects_foreign_stats() {
    let r = vec![refs(&["a dog barks"]), refs(&["rain falls"])];
    let other = vec![refs(&["a dog barks"]), refs(&["rain falls hard"])];
    let c = vec![t("a dog"), t("rain")];
    let stats = CorpusStats::from_references(&other);
    assert!(matches!(cider_d(&c, &r, &stats), Err(MetricError::StatsMismatch)));
    let stats = CorpusStats::from_references(&r[..1]);
    assert!(matches!(cider_d(&c, &r, &stats), Err(MetricError::StatsMismatch)));
}

#[test]
fn cider_df_bounded_by_documents() {
    let r = vec![refs(&["a b a b", "a b"]), refs(&["b c"]), refs(&["a"])];
    let stats = CorpusStats::from_references(&r);
    assert_eq!(stats.num_documents, 3);
    assert!(stats.document_frequency.values().all(|&d| (1..=3).contains(&d)));
    assert_eq!(stats.document_frequency[&vec!["a".to_string()]], 2);
}

/// Dense-vector CIDEr-D over an explicit n-gram vocabulary.
fn brute_cider(cands: &[TokenizedCaption], refs: &[Vec<TokenizedCaption>]) -> Vec<f64> {
    let grams =
        |s: &[String], n: usize| -> Vec<Vec<String>> { (0..(s.len() + 1).saturating_sub(n)).map(|i| s[i..i + n].to_vec()).collect() };
    let n_docs = refs.len() as f64;
    let mut out = Vec::new();
    for (c, rs) in cands.iter().zip(refs) {
        let mut acc = 0.0;
        for r in rs {
            let pen = (-((c.len() as f64 - r.len() as f64).powi(2)) / 72.0).exp();
            let mut s = 0.0;
            for n in 1..=4 {
                let vocab: BTreeSet<Vec<String>> = grams(c, n).into_iter().chain(grams(r, n)).collect();
                let idf = |g: &Vec<String>| {
                    let df = refs.iter().filter(|rs| rs.iter().any(|x| grams(x, n).contains(g))).count();
                    (n_docs / df.max(1) as f64).ln()
                };
                let tf = |x: &[String], g: &Vec<String>| grams(x, n).iter().filter(|h| *h == g).count() as f64;
                let cv: Vec<f64> = vocab.iter().map(|g| tf(c, g) * idf(g)).collect();
                let rv: Vec<f64> = vocab.iter().map(|g| tf(r, g) * idf(g)).collect();
                let nc = cv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nr = rv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let sim = if nc == 0.0 && nr == 0.0 {
                    let ct: BTreeMap<_, _> = vocab.iter().map(|g| (g, tf(c, g) as u64)).collect();
                    let rt: BTreeMap<_, _> = vocab.iter().map(|g| (g, tf(r, g) as u64)).collect();
                    if !ct.values().all(|&k| k == 0) && ct == rt {
                        1.0
                    } else {
                        0.0
                    }
                } else if nc == 0.0 || nr == 0.0 {
                    0.0
                } else {
                    cv.iter().zip(&rv).map(|(a, b)| a.min(*b) * b).sum::<f64>() / (nc * nr)
                };
                s += sim * pen;
            }
            acc += s / 4.0;
        }
        out.push(10.0 * acc / rs.len() as f64);
    }
    out
}

#[test]
fn cider_matches_brute_force_on_toy_corpus() {
    let r = vec![
        refs(&["a dog barks loudly", "the dog barks"]),
        refs(&["rain falls on a roof", "heavy rain falls"]),
        refs(&["a dog barks while rain falls"]),
    ];
    let c = vec![t("a dog barks"), t("rain falls on the dog"), t("rain falls while a dog barks")];
    let stats = CorpusStats::from_references(&r);
    let fast = cider_d(&c, &r, &stats).unwrap();
    let slow = brute_cider(&c, &r);
    for (a, b) in fast.per_example.iter().zip(&slow) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn cider_is_bitwise_repeatable() {
    let words = ["a", "dog", "barks", "rain", "falls", "on", "the", "roof", "while", "wind", "blows", "loudly"];
    let mut rng = crate::numerics::RngState::new(3);
    let mut sentence = |len: usize| -> TokenizedCaption { (0..len).map(|_| words[rng.below(words.len())].to_string()).collect() };
    let r: Vec<Vec<TokenizedCaption>> = (0..40).map(|i| vec![sentence(6 + i % 5), sentence(8)]).collect();
    let c: Vec<TokenizedCaption> = (0..40).map(|i| sentence(5 + i % 7)).collect();
    let first = cider_d(&c, &r, &CorpusStats::from_references(&r)).unwrap();
    for _ in 0..20 {
        let again = cider_d(&c, &r, &CorpusStats::from_references(&r)).unwrap();
        assert_eq!(again.mean.to_bits(), first.mean.to_bits());
    }
}

fn pred(id: &str, c: &str) -> Prediction {
    Prediction { id: id.into(), caption: c.into() }
}

fn reference(id: &str, cs: &[&str]) -> Reference {
    Reference { id: id.into(), captions: cs.iter().map(|s| s.to_string()).collect() }
}

#[test]
fn evaluate_identity_hits_maxima() {
    let refs = vec![
        reference("a", &["a dog barks while rain falls"]),
        reference("b", &["an engine idles then a horn honks"]),
        reference("c", &["water drips into a sink"]),
    ];
    let preds: Vec<_> = refs.iter().map(|r| pred(&r.id, &r.captions[0])).collect();
    let rep = evaluate_corpus(&preds, &refs, Smoothing::None).unwrap();
    for (k, v) in rep.entries() {
        let target = if k == "cider_d" { 10.0 } else { 1.0 };
        assert!((v - target).abs() < 1e-9, "{k} = {v}");
    }
}

#[test]
fn evaluate_errors() {
    let refs = vec![reference("a", &["x y"])];
    assert!(matches!(evaluate_corpus(&[], &refs, Smoothing::None), Err(MetricError::NoPredictions)));
    let e = evaluate_corpus(&[pred("z", "x"), pred("a", "x"), pred("q", "x")], &refs, Smoothing::None).unwrap_err();
    match e {
        MetricError::MissingReferences(ids) => assert_eq!(ids, "q,z"),
        other => panic!("{other}"),
    }
    let dup = evaluate_corpus(&[pred("a", "x"), pred("a", "y")], &refs, Smoothing::None);
    assert!(matches!(dup, Err(MetricError::DuplicateId(_))));
}

#[test]
fn evaluate_tolerates_empty_prediction() {
    let refs = vec![reference("a", &["x y"]), reference("b", &["p q"])];
    let rep = evaluate_corpus(&[pred("a", "x y"), pred("b", "")], &refs, Smoothing::None).unwrap();
    assert!((rep.rouge_l - 0.5).abs() < 1e-12);
    assert!(rep.bleu_1 < 1.0);
}

#[test]
fn report_serialises() {
    let r = MetricReport { bleu_1: 0.5, bleu_2: 0.25, bleu_3: 0.125, bleu_4: 0.0, rouge_l: 0.75, cider_d: 2.0 };
    let j: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(j["cider_d"], 2.0);
    let csv = r.to_csv();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "metric,value");
    assert_eq!(lines[5], "rouge_l,0.75");
    assert_eq!(r.get("bleu_2"), Some(0.25));
    assert_eq!(r.get("spider"), None);
}

fn sentence() -> impl Strategy<Value = TokenizedCaption> {
    prop::collection::vec(prop::sample::select(vec!["a", "dog", "rain", "falls", "barks", "the", "while"]), 1..8)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn scores_in_range(c in prop::collection::vec(sentence(), 1..5), seed in 0usize..100) {
        let refs: Vec<Vec<TokenizedCaption>> = c.iter().enumerate()
            .map(|(i, x)| vec![x.iter().rev().cloned().collect(), c[(i + seed) % c.len()].clone()])
            .collect();
        let rep = evaluate_tokenized(&c, &refs, Smoothing::None).unwrap();
        for (k, v) in rep.entries() {
            let hi = if k == "cider_d" { 10.0 + 1e-9 } else { 1.0 + 1e-12 };
            prop_assert!((0.0..=hi).contains(&v), "{} = {}", k, v);
        }
    }

    #[test]
    fn scores_invariant_under_reordering(c in prop::collection::vec(sentence(), 2..6), r in prop::collection::vec(sentence(), 6)) {
        let refs: Vec<Vec<TokenizedCaption>> = (0..c.len()).map(|i| vec![r[i].clone(), r[(i + 1) % 6].clone()]).collect();
        let a = evaluate_tokenized(&c, &refs, Smoothing::AddEpsilon).unwrap();
        let mut idx: Vec<usize> = (0..c.len()).collect();
        idx.reverse();
        idx.rotate_left(1);
        let c2: Vec<_> = idx.iter().map(|&i| c[i].clone()).collect();
        let r2: Vec<_> = idx.iter().map(|&i| refs[i].clone()).collect();
        let b = evaluate_tokenized(&c2, &r2, Smoothing::AddEpsilon).unwrap();
        for ((_, x), (_, y)) in a.entries().iter().zip(b.entries()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn adding_reference_never_lowers_rouge(c in sentence(), r in prop::collection::vec(sentence(), 1..4), extra in sentence()) {
        let before = rouge_l(&c, &r).unwrap();
        let mut more = r.clone();
        more.push(extra);
        prop_assert!(rouge_l(&c, &more).unwrap() >= before);
    }
}

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use spmoe::metrics::{
    bleu, brevity_penalty, distinct_1, evaluate_records, metric_tokens, ngram_diversity, pairwise_bleu,
    pattern_diversity, pd_over_set, unclipped_ngram_diversity, GenerationRecord, PdConfig,
};
use spmoe::Error;

const CANDIDATE: &str = "The the the the the the the.";
const REFERENCE: &str = "The cat is on the mat.";

fn toks(s: &str) -> Vec<String> {
    metric_tokens(s)
}

#[test]
fn example_one_counts() {
    let (c, r) = (toks(CANDIDATE), toks(REFERENCE));
    assert_eq!(c.len(), 7);
    assert_eq!(r.iter().filter(|t| *t == "the").count(), 2);
    assert_eq!(ngram_diversity(&c, &r, 1).unwrap(), 5.0 / 7.0);
    assert_eq!(unclipped_ngram_diversity(&c, &r, 1).unwrap(), 0.0);
}

#[test]
fn example_one_pd_and_bleu() {
    let (c, r) = (toks(CANDIDATE), toks(REFERENCE));
    let pd = pattern_diversity(&c, &r, &PdConfig::uniform(1).unwrap()).unwrap();
    assert_abs_diff_eq!(pd, 5.0 / 7.0, epsilon = 1e-12);
    // Seven candidate tokens against six reference tokens: BP = 1.
    assert_abs_diff_eq!(bleu(&c, &[r.clone()], 1).unwrap(), 2.0 / 7.0, epsilon = 1e-12);
    // High overlap pairs score low diversity; the reverse direction shows both moving together.
    let same_bleu = bleu(&r, &[r.clone()], 1).unwrap();
    let same_pd = pattern_diversity(&r, &r, &PdConfig::uniform(1).unwrap()).unwrap();
    assert!(same_bleu > bleu(&c, &[r.clone()], 1).unwrap());
    assert!(same_pd < pd);
}

#[test]
fn brevity_penalty_examples() {
    assert_eq!(brevity_penalty(10, 7).unwrap(), 1.0);
    assert_eq!(brevity_penalty(7, 7).unwrap(), 1.0);
    assert_abs_diff_eq!(brevity_penalty(1, 7).unwrap(), (-6f64).exp(), epsilon = 1e-12);
    let dog = toks("Dog.");
    assert_eq!(dog, vec!["dog"]);
    let r = toks(REFERENCE).len();
    assert_abs_diff_eq!(
        brevity_penalty(dog.len(), r).unwrap(),
        (1.0 - r as f64).exp(),
        epsilon = 1e-12
    );
    assert!(matches!(brevity_penalty(0, 3), Err(Error::InvalidLength(_))));
    assert!(matches!(brevity_penalty(3, 0), Err(Error::InvalidLength(_))));
}

#[test]
fn brevity_penalty_rises_to_one() {
    let r = 12;
    let values: Vec<f64> = (1..=r).map(|c| brevity_penalty(c, r).unwrap()).collect();
    assert!(values.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(values[r - 1], 1.0);
}

#[test]
fn pd_extremes() {
    let a = toks("alpha beta gamma delta epsilon");
    let b = toks("one two three four five");
    let cfg = PdConfig::default();
    assert_eq!(pattern_diversity(&a, &a, &cfg).unwrap(), 0.0);
    assert_abs_diff_eq!(pattern_diversity(&a, &b, &cfg).unwrap(), 1.0, epsilon = 1e-12);
    assert_eq!(pd_over_set(&[a.clone(), a.clone(), a.clone()], &cfg).unwrap(), 0.0);
    assert_abs_diff_eq!(pd_over_set(&[a.clone(), b.clone()], &cfg).unwrap(), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(pd_over_set(&[a.clone(), a.clone(), b.clone()], &cfg).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
    assert!(matches!(pd_over_set(&[a.clone()], &cfg), Err(Error::InsufficientOutputs(1))));
}

#[test]
fn bleu_examples() {
    let a = toks("the quick brown fox jumps");
    let b = toks("lorem ipsum dolor sit amet");
    assert_abs_diff_eq!(bleu(&a, &[a.clone()], 4).unwrap(), 1.0, epsilon = 1e-12);
    assert_eq!(bleu(&a, &[b.clone()], 4).unwrap(), 0.0);
    let pair = pairwise_bleu(&[a.clone(), b.clone()], 2).unwrap();
    let expected = (bleu(&a, &[b.clone()], 2).unwrap() + bleu(&b, &[a.clone()], 2).unwrap()) / 2.0;
    assert_eq!(pair, expected);
    assert_eq!(pairwise_bleu(&[a.clone(), a.clone()], 4).unwrap(), 1.0);
    assert_eq!(pairwise_bleu(&[a.clone(), b.clone()], 1).unwrap(), 0.0);
    assert!(matches!(pairwise_bleu(&[a], 4), Err(Error::InsufficientOutputs(1))));
}

#[test]
fn distinct_examples() {
    assert_eq!(distinct_1::<String, _>(&[toks("a b c")]).unwrap(), 1.0);
    assert_eq!(distinct_1::<String, _>(&[toks("a a"), toks("a a")]).unwrap(), 0.25);
    assert!(matches!(distinct_1::<String, Vec<String>>(&[]), Err(Error::EmptyInput(_))));
}

#[test]
fn report_from_records() {
    let records = vec![
        GenerationRecord {
            input: "x".into(),
            outputs: vec![CANDIDATE.into(), REFERENCE.into()],
            references: vec![REFERENCE.into()],
        },
        GenerationRecord {
            input: "y".into(),
            outputs: vec!["same words here".into(), "same words here".into()],
            references: vec![],
        },
    ];
    let report = evaluate_records(&records).unwrap();
    assert_eq!(report.records, 2);
    assert!(report.bleu_1.is_some());
    let pd1_first = {
        let (c, r) = (toks(CANDIDATE), toks(REFERENCE));
        let cfg = PdConfig::uniform(1).unwrap();
        (pattern_diversity(&c, &r, &cfg).unwrap() + pattern_diversity(&r, &c, &cfg).unwrap()) / 2.0
    };
    assert_abs_diff_eq!(report.pd_1, pd1_first / 2.0, epsilon = 1e-12);
    assert!(matches!(evaluate_records(&[]), Err(Error::EmptyInput(_))));
}

fn sentence() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 1..10)
}

proptest! {
    #[test]
    fn pd_is_in_unit_interval(c in sentence(), r in sentence()) {
        let pd = pattern_diversity(&c, &r, &PdConfig::default()).unwrap();
        prop_assert!((0.0..=1.0).contains(&pd));
    }

    #[test]
    fn clipping_is_monotone_in_reference_copies(c in sentence(), r in sentence(), extra in 0usize..6) {
        let base = ngram_diversity(&c, &r, 1).unwrap();
        let mut grown = r.clone();
        grown.extend(c.iter().cycle().take(extra));
        let after = ngram_diversity(&c, &grown, 1).unwrap();
        prop_assert!(after <= base + 1e-15);
        prop_assert!(ngram_diversity(&c, &r, 1).unwrap() >= unclipped_ngram_diversity(&c, &r, 1).unwrap());
    }

    #[test]
    fn set_scores_ignore_output_order(outs in prop::collection::vec(sentence(), 2..5)) {
        let mut rev = outs.clone();
        rev.reverse();
        let cfg = PdConfig::default();
        prop_assert!((pd_over_set(&outs, &cfg).unwrap() - pd_over_set(&rev, &cfg).unwrap()).abs() < 1e-12);
        prop_assert!((pairwise_bleu(&outs, 4).unwrap() - pairwise_bleu(&rev, 4).unwrap()).abs() < 1e-12);
    }
}

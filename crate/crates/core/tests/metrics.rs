// SPDX-License-Identifier: MIT OR Apache-2.0

mod support;

use laser_core::eval::{
    classification_accuracy, evaluate, generation_accuracy, generation_matches, split,
    validation_size, Aggregates, Content, EvalConfig, Metric, SampleRecord,
};
use laser_core::transformer::{ByteTokenizer, TransformerModel};
use proptest::prelude::*;
use support::{ids_sample, random_ids_dataset, small_config};

fn text(s: &str) -> Content {
    Content::Text(s.to_owned())
}

#[test]
fn generation_matching_normalizes_text() {
    let gen = |s: &str| ByteTokenizer.encode(s);
    assert!(generation_matches(
        &text("Paris"),
        &gen(" paris, of course")
    ));
    assert!(generation_matches(&text("  PARIS \n"), &gen("Paris")));
    assert!(generation_matches(
        &text("new york"),
        &gen("It is New York.")
    ));
    assert!(!generation_matches(&text("Paris"), &gen("Pari s")));
    assert!(!generation_matches(&text("Rome"), &gen("")));
    assert!(generation_matches(&Content::Ids(vec![3, 4]), &[1, 3, 4, 2]));
    assert!(!generation_matches(&Content::Ids(vec![3, 4]), &[3, 1, 4]));
}

#[test]
fn zero_model_generates_lowest_token() {
    let model = TransformerModel::zeros(small_config(1, 9, 6)).unwrap();
    let out = generation_accuracy(&model, &[5, 6], &Content::Ids(vec![0, 0]), 3).unwrap();
    assert_eq!(out.tokens, vec![0, 0, 0]);
    assert!(out.correct);
    let out = generation_accuracy(&model, &[5, 6, 7, 8], &Content::Ids(vec![1]), 10).unwrap();
    assert_eq!(out.tokens.len(), 3, "generation stops at the context limit");
    assert!(!out.correct);
}

#[test]
fn classification_ties_are_wrong() {
    let model = TransformerModel::zeros(small_config(1, 9, 6)).unwrap();
    let candidates = vec![vec![1], vec![2], vec![3]];
    for gold in 0..3 {
        let out = classification_accuracy(&model, &[4], &candidates, gold, false).unwrap();
        assert!(!out.correct);
        assert_eq!(out.predicted, 0);
    }
    // Unnormalized scores favour the shorter candidate on a uniform model.
    let out = classification_accuracy(&model, &[4], &[vec![1, 1], vec![2]], 1, false).unwrap();
    assert!(out.correct);
    let out = classification_accuracy(&model, &[4], &[vec![1, 1], vec![2]], 1, true).unwrap();
    assert!(!out.correct);
}

#[test]
fn split_sizes() {
    let samples = random_ids_dataset(0, 13, 5);
    let s = split(&samples, 9).unwrap();
    assert_eq!((s.validation.len(), s.test.len()), (3, 10));
    assert_eq!(validation_size(13), 3);
    assert_eq!(validation_size(10), 2);
    assert_eq!(validation_size(100), 20);
    let mut ids: Vec<_> = s
        .validation
        .iter()
        .chain(&s.test)
        .map(|x| x.id.clone())
        .collect();
    ids.sort();
    assert_eq!(
        ids,
        samples.iter().map(|x| x.id.clone()).collect::<Vec<_>>()
    );
    assert!(split(&samples[..4], 0).is_err());
}

#[test]
fn report_accuracy_is_mean_of_flags() {
    let model = TransformerModel::random(small_config(2, 7, 8), 5).unwrap();
    let mut samples = random_ids_dataset(5, 40, 7);
    samples.push(ids_sample("x", vec![1], vec![0]));
    let report = evaluate(
        &model,
        &samples,
        &EvalConfig::new(Metric::Generation { max_tokens: 2 }),
    )
    .unwrap();
    let flags: Vec<f64> = report
        .samples
        .iter()
        .map(|r| r.correct as u8 as f64)
        .collect();
    let mean = flags.iter().sum::<f64>() / flags.len() as f64;
    assert!((report.aggregates.accuracy - mean).abs() <= 1e-12);
    let loss = report.samples.iter().map(|r| r.loss).sum::<f64>() / flags.len() as f64;
    assert!((report.aggregates.mean_loss - loss).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn aggregate_is_mean(flags in prop::collection::vec(any::<bool>(), 1..200)) {
        let records: Vec<SampleRecord> = flags
            .iter()
            .enumerate()
            .map(|(i, &c)| serde_json::from_value(serde_json::json!({"id": format!("{i}"), "correct": c, "loss": i as f64})).unwrap())
            .collect();
        let agg = Aggregates::from_records(&records, &EvalConfig::default()).unwrap();
        let mean = flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64;
        prop_assert!((agg.accuracy - mean).abs() <= 1e-12);
    }
}

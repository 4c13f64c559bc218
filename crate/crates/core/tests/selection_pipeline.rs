mod common;

use std::collections::HashSet;

use common::*;
use ctxsel_core::analysis::{combine_pairwise, winning_score, Judgment, Outcome};
use ctxsel_core::corpus::{load_corpus, save_corpus, CorpusFormat, Sample};
use ctxsel_core::scoring::GlobalScore;
use ctxsel_core::selection::{
    apply_selector, baseline_select, export_labeled, export_subset, label_top_k, read_labeled,
    roc_auc, select_top_k, subset_size, train_selector, BaselineMethod, Label, SelectionConfig,
    SelectorModel, TrainConfig,
};
use proptest::prelude::*;

fn globals(scores: &[f64]) -> Vec<GlobalScore> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .iter()
        .enumerate()
        .map(|(rank, &i)| GlobalScore {
            sample_id: format!("g{i:05}"),
            global_icon: scores[i],
            task_count: 1,
            rank: rank + 1,
        })
        .collect()
}

#[test]
fn selector_separates_marked_samples() {
    let corpus = separable_corpus(1, 1000, 0.15, "train");
    let examples: Vec<(&Sample, bool)> = corpus.iter().map(|(s, l)| (s, *l)).collect();
    let config = TrainConfig { seed: 17, ..TrainConfig::default() };
    let model = train_selector(&examples, &config).unwrap();
    let accuracy = model.metadata.holdout_accuracy.unwrap();
    assert!(accuracy >= 0.95, "hold-out accuracy {accuracy}");

    let fresh = separable_corpus(2, 1000, 0.15, "fresh");
    let pool: Vec<Sample> = fresh.iter().map(|(s, _)| s.clone()).collect();
    let labels: Vec<bool> = fresh.iter().map(|(_, l)| *l).collect();
    let (scored, _) = apply_selector(&model, &pool);
    let probs: Vec<f64> = scored.iter().map(|s| s.probability).collect();
    let auc = roc_auc(&probs, &labels).unwrap();
    assert!(auc >= 0.95, "fresh-pool AUC {auc}");

    let again = train_selector(&examples, &config).unwrap();
    assert_eq!(model.weights, again.weights);
    assert_eq!(model.bias, again.bias);
    assert_eq!(model.threshold, again.threshold);
}

#[test]
fn selector_file_round_trips_exactly() {
    let corpus = separable_corpus(5, 300, 0.2, "rt");
    let examples: Vec<(&Sample, bool)> = corpus.iter().map(|(s, l)| (s, *l)).collect();
    let model = train_selector(&examples, &TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("selector.json");
    model.save(&path).unwrap();
    let loaded = SelectorModel::load(&path).unwrap();
    assert_eq!(loaded, model);
    let pool: Vec<Sample> = corpus.iter().map(|(s, _)| s.clone()).collect();
    assert_eq!(apply_selector(&loaded, &pool), apply_selector(&model, &pool));
}

#[test]
fn labeled_export_has_k_percent_positives() {
    let corpus = separable_corpus(3, 100, 0.5, "g");
    let samples: Vec<Sample> = corpus.iter().map(|(s, _)| s.clone()).collect();
    let scores: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 10.0).collect();
    let ranked = globals(&scores);
    let labeled = label_top_k(&ranked, &SelectionConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labeled.jsonl");
    assert_eq!(export_labeled(&labeled, &samples, &path).unwrap(), 15);
    let back = read_labeled(&path).unwrap();
    assert_eq!(back.len(), 100);
    assert_eq!(back.iter().filter(|r| r.label == Label::HighContribution).count(), 15);
    let top15: HashSet<String> = select_top_k(&ranked, 15.0).unwrap().into_iter().collect();
    for l in &labeled {
        assert_eq!(l.label == Label::HighContribution, top15.contains(&l.sample_id));
    }
}

#[test]
fn subset_sizes_on_full_corpus() {
    let n = 52_002;
    let samples: Vec<Sample> = (0..n)
        .map(|i| Sample::new(format!("r{i:06}"), format!("do task {i}"), None, format!("done {i}"), "big").unwrap())
        .collect();
    let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64).collect();
    let ranked: Vec<GlobalScore> = globals(&scores)
        .into_iter()
        .map(|g| GlobalScore { sample_id: g.sample_id.replace('g', "r").replacen("r", "r0", 1), ..g })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    for (k, want) in [(1.0, 521), (5.0, 2601), (10.0, 5201), (15.0, 7801)] {
        assert_eq!(subset_size(n, k).unwrap(), want);
        let ids = select_top_k(&ranked, k).unwrap();
        assert_eq!(ids.len(), want);
        let path = dir.path().join(format!("top{k}.json"));
        export_subset(&samples, &ids, &path, CorpusFormat::AlpacaJson).unwrap();
        assert_eq!(load_corpus(&path, CorpusFormat::AlpacaJson).unwrap().len(), want);
    }
}

#[test]
fn random_baseline_is_seeded() {
    let samples: Vec<Sample> = separable_corpus(9, 200, 0.1, "b").into_iter().map(|(s, _)| s).collect();
    let a = baseline_select(&samples, None, BaselineMethod::Random, 10.0, 4).unwrap();
    let b = baseline_select(&samples, None, BaselineMethod::Random, 10.0, 4).unwrap();
    let c = baseline_select(&samples, None, BaselineMethod::Random, 10.0, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 20);
    assert_eq!(a.iter().collect::<HashSet<_>>().len(), 20);
}

#[test]
fn pairwise_rules_cover_all_orders() {
    use Judgment::*;
    let table = [
        (Win, Win, Outcome::Win),
        (Win, Tie, Outcome::Win),
        (Tie, Win, Outcome::Win),
        (Tie, Tie, Outcome::Tie),
        (Win, Lose, Outcome::Tie),
        (Lose, Win, Outcome::Tie),
        (Lose, Lose, Outcome::Lose),
        (Lose, Tie, Outcome::Lose),
        (Tie, Lose, Outcome::Lose),
    ];
    for (a, b, want) in table {
        assert_eq!(combine_pairwise(a, b), want, "{a:?}/{b:?}");
    }
    assert_eq!(winning_score(50, 30, 100).unwrap(), 1.2);
}

fn arb_sample() -> impl Strategy<Value = Sample> {
    (
        "[a-z]{1,6}",
        "[ -~]{1,40}",
        proptest::option::of("[ -~\n\u{e9}\u{4e2d}]{1,30}"),
        "[ -~\n\u{e9}]{1,40}",
    )
        .prop_filter_map("blank fields", |(id, ins, inp, resp)| {
            Sample::new(format!("id-{id}"), ins, inp, resp, "prop").ok()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jsonl_corpus_round_trips(samples in proptest::collection::vec(arb_sample(), 1..8)) {
        let mut seen = HashSet::new();
        let samples: Vec<Sample> = samples.into_iter().filter(|s| seen.insert(s.id.clone())).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_corpus(&samples, &path, CorpusFormat::Jsonl).unwrap();
        prop_assert_eq!(load_corpus(&path, CorpusFormat::Jsonl).unwrap(), samples);
    }

    #[test]
    fn alpaca_round_trip_keeps_content(samples in proptest::collection::vec(arb_sample(), 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        save_corpus(&samples, &path, CorpusFormat::AlpacaJson).unwrap();
        let back = load_corpus(&path, CorpusFormat::AlpacaJson).unwrap();
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            prop_assert_eq!(&a.instruction, &b.instruction);
            prop_assert_eq!(&a.input, &b.input);
            prop_assert_eq!(&a.response, &b.response);
        }
    }

    #[test]
    fn winning_score_is_antisymmetric(w in 0u64..500, l in 0u64..500, extra in 0u64..500) {
        let n = w + l + extra;
        prop_assume!(n > 0);
        let forward = winning_score(w, l, n).unwrap();
        let backward = winning_score(l, w, n).unwrap();
        prop_assert_eq!(forward + backward, 2.0);
    }

    #[test]
    fn pairwise_rule_is_order_symmetric(a in 0usize..3, b in 0usize..3) {
        let j = [Judgment::Win, Judgment::Tie, Judgment::Lose];
        prop_assert_eq!(combine_pairwise(j[a], j[b]), combine_pairwise(j[b], j[a]));
    }

    #[test]
    fn larger_k_selects_a_superset(scores in proptest::collection::vec(-5.0f64..5.0, 1..120), k1 in 0.5f64..100.0, k2 in 0.5f64..100.0) {
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let ranked = globals(&scores);
        let small: HashSet<String> = select_top_k(&ranked, lo).unwrap().into_iter().collect();
        let large: HashSet<String> = select_top_k(&ranked, hi).unwrap().into_iter().collect();
        prop_assert!(small.is_subset(&large));
        prop_assert_eq!(large.len(), subset_size(scores.len(), hi).unwrap());
    }

    #[test]
    fn subset_size_is_ceiling(m in 1usize..100_000, k in 0.01f64..100.0) {
        let size = subset_size(m, k).unwrap();
        let exact = m as f64 * k / 100.0;
        prop_assert!(size >= 1 && size <= m);
        prop_assert!(size as f64 + 1e-9 >= exact);
        prop_assert!((size as f64) < exact + 1.0 + 1e-9);
    }
}

use dncshap::labels::{assign_label, corpus_stats, ClassCounts, CorpusStats, EmotionClass, LabelRule, Winner};
use dncshap::metrics::{accuracy, cohen_kappa, macro_f1, report, ConfusionMatrix};
use proptest::prelude::*;

fn probability_vector(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..1.0, k).prop_map(|w| {
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    })
}

fn permutation(k: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..k).collect::<Vec<_>>()).prop_shuffle()
}

/// `out[perm[i]] = v[i]`.
fn scatter(v: &[f64], perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p] = v[i];
    }
    out
}

#[test]
fn worked_example_and_discard_rule() {
    let d = assign_label(&[0.1, 0.1, 0.7, 0.1], &[0.1, 0.8, 0.05, 0.05], 0.5).unwrap();
    assert_eq!(d.label, Some(EmotionClass::Happy));
    assert_eq!(d.label.unwrap().index(), 1);
    assert_eq!((d.max1, d.max2, d.winner), (0.7, 0.8, Winner::Image));
    let uniform = assign_label(&[0.25; 4], &[0.25; 4], 0.5).unwrap();
    assert_eq!(uniform.label, None);
}

#[test]
fn stats_format_round_trips() {
    let stats = CorpusStats {
        counts: ClassCounts {
            anger: 19913,
            happy: 42958,
            hate: 4401,
            sad: 13621,
        },
        discarded: 0,
        total: 80893,
    };
    let text = stats.render();
    assert_eq!(
        text,
        "anger 19913\nhappy 42958\nhate 4401\nsad 13621\ndiscarded 0\ntotal 80893\n"
    );
    assert_eq!(text.parse::<CorpusStats>().unwrap(), stats);
    let json = serde_json::to_string(&stats).unwrap();
    assert_eq!(serde_json::from_str::<CorpusStats>(&json).unwrap(), stats);

    assert!("anger 1\nhappy 1\nhate 1\nsad 1\ndiscarded 0\ntotal 5\n"
        .parse::<CorpusStats>()
        .is_err());
    assert!("anger 1\nhappy 1\nhate 1\ndiscarded 0\ntotal 3\n"
        .parse::<CorpusStats>()
        .is_err());
    assert!("excitement 1\nhappy 1\nhate 1\nsad 1\ndiscarded 0\ntotal 4\n"
        .parse::<CorpusStats>()
        .is_err());
}

#[test]
fn confusion_fixture() {
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![1, 3]]).unwrap();
    let r = report(&cm).unwrap();
    assert!((r.accuracy - 0.75).abs() < 1e-12);
    assert!((r.macro_f1 - 0.75).abs() < 1e-12);
    assert!((r.cohen_kappa - 0.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn threshold_decides_assignment(ser in probability_vector(4), ier in probability_vector(4), threshold in 0.2f64..0.9) {
        let d = assign_label(&ser, &ier, threshold).unwrap();
        prop_assert_eq!(d.is_assigned(), d.max1.max(d.max2) >= threshold);
    }

    #[test]
    fn class_order_does_not_matter(ser in probability_vector(4), ier in probability_vector(4), perm in permutation(4)) {
        let base = assign_label(&ser, &ier, 0.3).unwrap();
        let names: Vec<String> = EmotionClass::ALL.iter().map(|c| c.name().to_string()).collect();
        let mut columns = vec![String::new(); 4];
        for (i, &p) in perm.iter().enumerate() {
            columns[p] = names[i].clone();
        }
        let rule = LabelRule { threshold: 0.3, columns, ..LabelRule::default() };
        let moved = rule.decide(&scatter(&ser, &perm), &scatter(&ier, &perm)).unwrap();
        prop_assert_eq!(moved, base);

        // With fixed names, the assigned index follows the permutation.
        let relabeled = assign_label(&scatter(&ser, &perm), &scatter(&ier, &perm), 0.3).unwrap();
        prop_assert_eq!(relabeled.label.map(|c| c.index()), base.label.map(|c| perm[c.index()]));
    }

    #[test]
    fn stats_totals_add_up(rows in proptest::collection::vec((probability_vector(4), probability_vector(4)), 0..40)) {
        let decisions: Vec<_> = rows.iter().map(|(s, i)| assign_label(s, i, 0.5).unwrap()).collect();
        let stats = corpus_stats(&decisions);
        prop_assert_eq!(stats.total, rows.len() as u64);
        prop_assert_eq!(stats.assigned() + stats.discarded, stats.total);
        prop_assert_eq!(stats.render().parse::<CorpusStats>().unwrap(), stats);
    }

    #[test]
    fn metrics_ignore_class_order(
        cells in proptest::collection::vec(0u64..20, 16).prop_filter("nonempty", |c| c.iter().sum::<u64>() > 0),
        perm in permutation(4),
    ) {
        let cm = ConfusionMatrix::from_rows(&cells.chunks(4).map(<[u64]>::to_vec).collect::<Vec<_>>()).unwrap();
        let moved = cm.permuted(&perm).unwrap();
        prop_assert_eq!(moved.total(), cm.total());
        prop_assert!((accuracy(&moved).unwrap() - accuracy(&cm).unwrap()).abs() < 1e-12);
        prop_assert!((macro_f1(&moved).unwrap() - macro_f1(&cm).unwrap()).abs() < 1e-12);
        prop_assert!((cohen_kappa(&moved).unwrap() - cohen_kappa(&cm).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kappa_is_one_exactly_without_confusion(diag in proptest::collection::vec(0u64..20, 3), off in 0u64..3) {
        let rows = vec![vec![diag[0], off, 0], vec![0, diag[1], 0], vec![0, 0, diag[2]]];
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        prop_assume!(cm.total() > 0);
        let k = cohen_kappa(&cm).unwrap();
        let marginals_degenerate = (0..3).filter(|&i| cm.get(i, i) > 0).count() <= 1 && off == 0;
        prop_assume!(!marginals_degenerate);
        prop_assert_eq!((k - 1.0).abs() < 1e-12, off == 0);
    }
}

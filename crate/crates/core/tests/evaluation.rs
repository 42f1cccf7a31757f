use proptest::prelude::*;

use dreamnet::dataset::{generate, split, GeneratorSpec};
use dreamnet::evaluation::{auc, kfold_indices, multilabel_metrics, multilabel_metrics_with, pearson_r, Averaging};

fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..12, n).prop_map(|v| v.into_iter().map(|x| f64::from(x) / 11.0).collect()),
            prop::collection::vec(any::<bool>(), n).prop_map(|mut l| {
                l[0] = true;
                l[1] = false;
                l
            }),
        )
    })
}

fn prob_matrix() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..30, 1usize..6).prop_flat_map(|(n, w)| {
        (
            prop::collection::vec(prop::collection::vec(0.0f64..=1.0, w), n),
            prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), Just(1.0)], w), n),
        )
    })
}

proptest! {
    #[test]
    fn auc_matches_pair_enumeration((scores, labels) in scored_labels()) {
        prop_assert_eq!(auc(&scores, &labels).unwrap(), pair_auc(&scores, &labels));
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps((scores, labels) in scored_labels()) {
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp()).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&squashed, &labels).unwrap());
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auc(&scores, &labels).unwrap() + auc(&flipped, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_sample_order((probs, labels) in prob_matrix(), rot in 0usize..30) {
        let k = rot % probs.len();
        let mut p2 = probs.clone();
        let mut y2 = labels.clone();
        p2.rotate_left(k);
        y2.rotate_left(k);
        for avg in [Averaging::Micro, Averaging::Macro] {
            let a = multilabel_metrics_with(&probs, &labels, 0.5, avg).unwrap();
            let b = multilabel_metrics_with(&p2, &y2, 0.5, avg).unwrap();
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            prop_assert_eq!(a.subset_accuracy, b.subset_accuracy);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval((probs, labels) in prob_matrix(), tau in 0.01f64..0.99) {
        let m = multilabel_metrics(&probs, &labels, tau).unwrap();
        for v in [m.accuracy, m.subset_accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
        prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
    }

    #[test]
    fn gold_labels_as_probabilities_score_perfectly((_, labels) in prob_matrix()) {
        let m = multilabel_metrics(&labels, &labels, 0.5).unwrap();
        prop_assert_eq!(m.f1, 1.0);
        prop_assert_eq!(m.subset_accuracy, 1.0);
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        xy in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..60),
        a in 0.1f64..10.0,
        b in -20.0f64..20.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        let Ok(r) = pearson_r(&x, &y) else { return Ok(()); };
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((r - pearson_r(&y, &x).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((r - pearson_r(&scaled, &y).unwrap()).abs() < 1e-9);
        let negated: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((r + pearson_r(&negated, &y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn kfold_partitions_every_index(n in 2usize..300, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let folds = kfold_indices(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(kfold_indices(n, k, seed).unwrap(), folds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_a_deterministic_partition(n in 3usize..200, seed in any::<u64>()) {
        let data = generate(&GeneratorSpec { n, seed, eeg_fraction: 0.0, ..GeneratorSpec::default() }).unwrap();
        let (a, b, c) = split(&data.records, (0.7, 0.2, 0.1), seed).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        let mut ids: Vec<&str> = a.iter().chain(&b).chain(&c).map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        let again = split(&data.records, (0.7, 0.2, 0.1), seed).unwrap();
        prop_assert_eq!(again.0, a);
    }
}

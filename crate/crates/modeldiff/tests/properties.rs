//! Property tests for the cross-cutting invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;

use modeldiff::diff_llm::pca::{rows_to_matrix, Pca};
use modeldiff::diff_llm::{hdbscan::hdbscan, normalize_attribution, RawDifference};
use modeldiff::diff_sae::{
    feature_frequency_diff, pool_completion, select_candidates, ActivationDump, ActivationEntry,
    FeatureStats, PooledMatrix, TextMeta,
};
use modeldiff::judge::{resolve_verdict, RawChoice};
use modeldiff::kl_fork::positional_score;
use modeldiff::metrics::{accuracy, frequency, vfd};
use modeldiff::Direction;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{2,8}"
}

proptest! {
    // Two raw differences identical up to swapped model names share their
    // neutral text.
    #[test]
    fn normalization_is_direction_invariant(before in word(), after in word()) {
        let text_a = format!("Model A {before} the {after}");
        let text_b = format!("Model B {before} the {after}");
        let rec_a = normalize_attribution(&RawDifference { triplet_id: "t".into(), text: text_a }).unwrap();
        let rec_b = normalize_attribution(&RawDifference { triplet_id: "t".into(), text: text_b }).unwrap();
        prop_assert_eq!(&rec_a.neutral_text, &rec_b.neutral_text);
        prop_assert_eq!(rec_a.attributed_to, Direction::A);
        prop_assert_eq!(rec_b.attributed_to, Direction::B);
        prop_assert!(!rec_a.neutral_text.contains("Model A"));
        prop_assert!(!rec_a.neutral_text.contains("Model B"));
    }

    // f and acc stay in [0, 1]; vfd stays within [-f, f]; negating the
    // nonzero verdicts negates vfd and complements acc.
    #[test]
    fn metric_bounds_and_antisymmetry(values in prop::collection::vec(-1i8..=1, 1..120)) {
        let f = frequency(&values).unwrap();
        let v = vfd(&values).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!(v >= -f - 1e-15 && v <= f + 1e-15);
        let negated: Vec<i8> = values.iter().map(|x| -x).collect();
        prop_assert_eq!(frequency(&negated).unwrap(), f);
        prop_assert!((vfd(&negated).unwrap() + v).abs() <= 1e-15);
        match (accuracy(&values).unwrap(), accuracy(&negated).unwrap()) {
            (Some(acc), Some(acc_neg)) => {
                prop_assert!((0.0..=1.0).contains(&acc));
                prop_assert!((acc + acc_neg - 1.0).abs() <= 1e-12);
            }
            (None, None) => prop_assert_eq!(f, 0.0),
            _ => prop_assert!(false, "acc definedness must match"),
        }
    }

    // Flipping the swap flag negates any non-NA verdict.
    #[test]
    fn verdict_swap_antisymmetry(raw_one in any::<bool>(), dir_a in any::<bool>()) {
        let raw = if raw_one { RawChoice::One } else { RawChoice::Two };
        let direction = if dir_a { Direction::A } else { Direction::B };
        prop_assert_eq!(
            resolve_verdict(raw, false, direction),
            -resolve_verdict(raw, true, direction)
        );
        prop_assert_eq!(resolve_verdict(RawChoice::Na, raw_one, direction), 0);
    }

    // Candidate selection ignores input permutation.
    #[test]
    fn candidate_selection_is_order_free(
        diffs in prop::collection::vec((-100i32..=100, 0u64..400), 1..50),
        k in 1usize..20,
    ) {
        let stats: Vec<FeatureStats> = diffs
            .iter()
            .enumerate()
            .map(|(i, (d, base))| {
                let diff = *d as f64 / 100.0;
                FeatureStats {
                    feature_id: base + i as u64 * 400, // unique ids
                    freq_a: diff.max(0.0),
                    freq_b: (-diff).max(0.0),
                    diff,
                    label: None,
                }
            })
            .collect();
        let mut shuffled = stats.clone();
        shuffled.reverse();
        let a: Vec<u64> = select_candidates(&stats, k).iter().map(|c| c.stats.feature_id).collect();
        let b: Vec<u64> = select_candidates(&shuffled, k).iter().map(|c| c.stats.feature_id).collect();
        prop_assert_eq!(a, b);
    }

    // Adding a completion-token activation never decreases a pooled value,
    // and swapping the dump sides negates every diff.
    #[test]
    fn pooling_monotone_and_diff_antisymmetric(
        entries in prop::collection::vec((0usize..6, 0usize..10, 0u64..8, 0.01f64..5.0), 0..60),
        extra in (0usize..6, 4usize..10, 0u64..8, 0.01f64..5.0),
    ) {
        let texts: Vec<TextMeta> = (0..6)
            .map(|i| TextMeta { text_id: format!("t{i}"), completion_start: 4, total_tokens: 10 })
            .collect();
        let build = |list: &[(usize, usize, u64, f64)]| ActivationDump {
            texts: texts.clone(),
            entries: list
                .iter()
                .map(|(text, token, feature, value)| ActivationEntry {
                    text_id: format!("t{text}"),
                    token: *token,
                    feature: *feature,
                    value: *value,
                })
                .collect(),
        };
        let base = pool_completion(&build(&entries));
        let mut extended_entries = entries.clone();
        extended_entries.push(extra);
        let extended = pool_completion(&build(&extended_entries));
        for (key, value) in &base.values {
            prop_assert!(extended.values.get(key).is_some_and(|v| v >= value));
        }

        // antisymmetry of the frequency diff under side swap
        let other = build(&entries.iter().rev().cloned().collect::<Vec<_>>());
        let pooled_other = pool_completion(&other);
        let forward = feature_frequency_diff(&base, &pooled_other).unwrap();
        let backward = feature_frequency_diff(&pooled_other, &base).unwrap();
        let back_by_id: BTreeMap<u64, f64> =
            backward.iter().map(|s| (s.feature_id, s.diff)).collect();
        for s in &forward {
            prop_assert_eq!(back_by_id[&s.feature_id], -s.diff);
        }
    }

    // PCA returns an orthonormal basis with non-increasing explained
    // variance on any well-formed input.
    #[test]
    fn pca_basis_invariants(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 6), 4..40),
        k in 1usize..4,
    ) {
        let matrix = rows_to_matrix(&rows).unwrap();
        let pca = Pca::fit(&matrix, k).unwrap();
        if !pca.zero_variance {
            let gram = pca.components.transpose() * &pca.components;
            for i in 0..k {
                for j in 0..k {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((gram[(i, j)] - expected).abs() < 1e-9);
                }
            }
        }
        for w in pca.explained_variance.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12);
        }
    }

    // Every non-noise HDBSCAN cluster meets the size floor, and labels are
    // unchanged by a global translation.
    #[test]
    fn hdbscan_size_floor_and_translation(
        points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 0..40),
        shift in -100.0f64..100.0,
    ) {
        let labels = hdbscan(&points, 4, 4).unwrap();
        let mut sizes: BTreeMap<i64, usize> = BTreeMap::new();
        for &l in &labels {
            if l >= 0 {
                *sizes.entry(l).or_default() += 1;
            }
        }
        for (label, size) in sizes {
            prop_assert!(size >= 4, "cluster {label} has {size} members");
        }
        let shifted: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().map(|v| v + shift).collect())
            .collect();
        prop_assert_eq!(hdbscan(&shifted, 4, 4).unwrap(), labels);
    }

    // score(P, P) = 0 for any distribution.
    #[test]
    fn kl_self_score_is_zero(weights in prop::collection::vec(0.01f64..1.0, 2..6)) {
        let total: f64 = weights.iter().sum();
        let mut entries: Vec<(String, f64)> = weights
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("tok{i}"), (w / total).ln()))
            .collect();
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let score = positional_score(0, &entries, &entries).unwrap();
        prop_assert!(score.kl.abs() <= 1e-12);
        prop_assert_eq!(score.score, 0.0);
    }
}

// The mock embedder maps equal neutral texts to equal vectors, so swapped
// attributions land on identical embedding rows.
#[test]
fn swapped_names_embed_identically() {
    use modeldiff::gateway::{mock::MockBackend, Gateway};
    let mock = MockBackend::new();
    let rec_a = normalize_attribution(&RawDifference {
        triplet_id: "t".into(),
        text: "Model A is more verbose".into(),
    })
    .unwrap();
    let rec_b = normalize_attribution(&RawDifference {
        triplet_id: "t".into(),
        text: "Model B is more verbose".into(),
    })
    .unwrap();
    let rows = mock
        .embed(&[rec_a.neutral_text.clone(), rec_b.neutral_text.clone()])
        .unwrap();
    assert_eq!(rows[0], rows[1]);
}

// Sparse pooled matrices only ever hold positive values.
#[test]
fn pooled_values_are_positive() {
    let dump = ActivationDump {
        texts: vec![TextMeta {
            text_id: "t0".into(),
            completion_start: 0,
            total_tokens: 4,
        }],
        entries: vec![ActivationEntry {
            text_id: "t0".into(),
            token: 1,
            feature: 3,
            value: 0.0,
        }],
    };
    let pooled: PooledMatrix = pool_completion(&dump);
    assert!(pooled.values.is_empty(), "zero activations are omitted");
}

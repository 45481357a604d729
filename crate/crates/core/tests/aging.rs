use proptest::prelude::*;
use ror_core::aging::*;
use ror_core::arch::ArchSpec;
use ror_core::data::{assign_folds, synth_dataset, LabelField, SynthConfig, Synthetic};
use ror_core::objective::LabelSpace;
use ror_core::trainer::{LabeledSet, OptimConfig};

fn sets(overlap: &[usize], size: usize, per_class: usize) -> (LabeledSet, LabeledSet, Synthetic) {
    let train = synth_dataset(&SynthConfig::new(8, per_class, size, 21).with_overlap(overlap)).unwrap();
    let val = synth_dataset(&SynthConfig::new(8, 100, size, 22).with_overlap(overlap)).unwrap();
    let space = LabelSpace::age_groups();
    (
        LabeledSet::from_dataset(&train.dataset, None, LabelField::Age, space.clone()).unwrap(),
        LabeledSet::from_dataset(&val.dataset, None, LabelField::Age, space).unwrap(),
        val,
    )
}

fn config(size: usize, epochs: usize) -> CurveConfig {
    CurveConfig {
        arch: ArchSpec::basic([1, 1, 1, 1], 2, [3, size, size]).with_widths([8, 16, 32, 64]),
        optim: OptimConfig::scaled(epochs, 32),
        drop_p_last: Some(0.5),
        augment: false,
        seed: 3,
    }
}

fn oracle(val: &Synthetic, labels: &[usize]) -> Vec<f64> {
    (1..8)
        .map(|k| {
            let pos: Vec<bool> = labels.iter().map(|&y| y > k).collect();
            threshold_accuracy(&val.latent, &pos)
        })
        .collect()
}

fn brute_threshold(values: &[f64], positive: &[bool]) -> f64 {
    let n = values.len();
    let mut cuts: Vec<f64> = values.to_vec();
    cuts.push(f64::NEG_INFINITY);
    let mut best = 0;
    for &c in &cuts {
        let correct = (0..n).filter(|&i| (values[i] > c) == positive[i]).count();
        best = best.max(correct).max(n - correct);
    }
    best as f64 / n as f64
}

proptest! {
    #[test]
    fn binarize_partitions(labels in prop::collection::vec(1usize..=8, 1..200)) {
        let mut prev = usize::MAX;
        for k in 1..8 {
            let s = binarize(&labels, 8, k).unwrap();
            prop_assert_eq!(s.positives.len() + s.negatives.len(), labels.len());
            let mut all: Vec<usize> = s.positives.iter().chain(&s.negatives).copied().collect();
            all.sort_unstable();
            prop_assert!(all.iter().enumerate().all(|(i, &j)| i == j));
            prop_assert!(s.positives.iter().all(|&i| labels[i] > k));
            prop_assert!(s.positives.len() <= prev);
            prev = s.positives.len();
        }
    }

    #[test]
    fn threshold_search_matches_brute_force(
        pairs in prop::collection::vec((0u8..20, any::<bool>()), 1..60)
    ) {
        let values: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 4.0).collect();
        let pos: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(threshold_accuracy(&values, &pos), brute_threshold(&values, &pos));
    }

    #[test]
    fn weights_come_from_levels(acc in prop::collection::vec(0.0f64..=1.0, 7)) {
        let curve = AgingCurve { classes: 8, points: acc.iter().enumerate().map(|(i, &a)| (i + 1, a)).collect(), failed: vec![] };
        let w = suggest_weights(&curve, &DEFAULT_LEVELS).unwrap();
        prop_assert_eq!(w.weights.len(), 8);
        prop_assert!(w.weights.iter().all(|v| DEFAULT_LEVELS.contains(v)));
    }
}

#[test]
fn binary_labels() {
    let s = binarize(&[5, 4, 1, 8], 8, 4).unwrap();
    assert_eq!(s.labels(), vec![2, 1, 1, 2]);
    assert!(binarize(&[9], 8, 4).is_err());
}

#[test]
fn dip_at_first_threshold_by_hand() {
    // hard cut: 0.6 + 0.25 * 0.4 = 0.7, only k = 1 is below it
    let curve = AgingCurve {
        classes: 8,
        points: vec![(1, 0.6), (2, 0.95), (3, 1.0), (4, 0.98), (5, 0.99), (6, 0.97), (7, 1.0)],
        failed: vec![],
    };
    let w = suggest_weights(&curve, &DEFAULT_LEVELS).unwrap();
    assert_eq!(w.weights, vec![1.3, 1.3, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    assert!(suggest_weights(&curve, &[1.5, 1.0]).is_err());
    assert!(suggest_weights(&curve, &[]).is_err());
}

#[test]
fn uniform_curve_gives_uniform_weights() {
    let curve = AgingCurve {
        classes: 8,
        points: (1..8).map(|k| (k, 0.9)).collect(),
        failed: vec![],
    };
    let w = suggest_weights(&curve, &[1.0, 2.0]).unwrap();
    assert_eq!(w.weights, vec![1.0; 8]);
}

#[test]
fn curve_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    let curve = AgingCurve {
        classes: 4,
        points: vec![(1, 0.5), (2, 0.125), (3, 1.0)],
        failed: vec![],
    };
    curve.write_csv(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "k,accuracy\n1,0.5\n2,0.125\n3,1\n");
    assert_eq!(AgingCurve::read_csv(&path, 4).unwrap(), curve);
}

#[test]
fn curve_needs_three_ordered_classes() {
    let (tr, va, _) = sets(&[], 8, 2);
    let two = LabeledSet::new(tr.images[..4].to_vec(), vec![1, 2, 1, 2], LabelSpace::ordered(2)).unwrap();
    assert!(compute_curve_sets::<f32>(&config(8, 1), &two, &two, Some(1)).is_err());
    let unordered = LabeledSet::new(tr.images.clone(), tr.labels.clone(), LabelSpace::unordered(8)).unwrap();
    assert!(compute_curve_sets::<f32>(&config(8, 1), &unordered, &va, Some(1)).is_err());
}

#[test]
fn curve_is_deterministic_and_thread_independent() {
    let (tr, va, _) = sets(&[4], 8, 6);
    let cfg = config(8, 2);
    let a = compute_curve_sets::<f32>(&cfg, &tr, &va, Some(1)).unwrap();
    let b = compute_curve_sets::<f32>(&cfg, &tr, &va, Some(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.points.iter().map(|p| p.0).collect::<Vec<_>>(), (1..8).collect::<Vec<_>>());
    assert!(a.points.iter().all(|p| (0.0..=1.0).contains(&p.1)));
}

#[test]
fn diverging_runs_mark_the_curve_partial() {
    let (tr, va, _) = sets(&[], 8, 4);
    let mut cfg = config(8, 2);
    cfg.optim.lr0 = 1e30;
    let curve = compute_curve_sets::<f32>(&cfg, &tr, &va, Some(1)).unwrap();
    assert!(curve.is_partial());
    assert_eq!(curve.failed, (1..8).collect::<Vec<_>>());
    assert!(curve.points.is_empty());
}

#[test]
fn fold_zero_validates() {
    let s = synth_dataset(&SynthConfig::new(8, 10, 8, 5)).unwrap();
    let folds = assign_folds(&s.dataset, 5, 1).unwrap();
    let curve = compute_curve::<f32>(&config(8, 1), &s.dataset, 8, &folds, Some(1)).unwrap();
    assert_eq!(curve.points.len() + curve.failed.len(), 7);
    assert_eq!(curve.classes, 8);
}

#[test]
fn middle_overlap_dips_in_the_middle() {
    let (tr, va, val) = sets(&[4, 5, 6], 16, 80);
    let expected = oracle(&val, &va.labels);
    let outer = expected[..3].iter().chain(&expected[6..]).copied().fold(f64::INFINITY, f64::min);
    let inner = expected[3..6].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(inner < outer, "oracle predicts the dip: {expected:?}");

    let curve = compute_curve_sets::<f32>(&config(16, 15), &tr, &va, None).unwrap();
    let acc = curve.accuracies();
    assert_eq!(acc.len(), 7);
    let early = acc[..3].iter().copied().fold(f64::INFINITY, f64::min);
    let middle = acc[3..6].iter().copied().fold(f64::INFINITY, f64::min);
    assert!(middle < early, "{acc:?}");
    let w = suggest_weights(&curve, &DEFAULT_LEVELS).unwrap();
    assert_eq!(w.weights, vec![1.0, 1.0, 1.0, 1.3, 1.5, 1.5, 1.3, 1.0], "{acc:?}");
}

#[test]
fn separable_latent_curve_tracks_oracle() {
    let (tr, va, val) = sets(&[], 16, 80);
    let expected = oracle(&val, &va.labels);
    let curve = compute_curve_sets::<f32>(&config(16, 15), &tr, &va, None).unwrap();
    for ((k, a), o) in curve.points.iter().zip(&expected) {
        assert!(*a >= o - 0.02, "k = {k}: {a} vs oracle {o}");
    }
    assert_eq!(suggest_weights(&curve, &DEFAULT_LEVELS).unwrap().weights, vec![1.0; 8]);
}

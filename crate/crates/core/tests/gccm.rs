use std::collections::HashSet;
use std::sync::OnceLock;

use neurmatch::gccm::half_diagonal;
use neurmatch::gccm::{
    accuracy, canonicalize_subset, default_train_config, draw_subsets, make_gccm_training_set, split_heldout,
    train_gccm, verify, verify_with, ConstantScorer, CorruptionConfig, GccmModel, GccmTrainOutcome, SubsetScorer,
    VerifyConfig,
};
use neurmatch::nn::TrainConfig;
use neurmatch::synthdata::{make_pretrain_tasks, DeformConfig, PairTask, SceneConfig, TaskOptions};
use neurmatch::{rng, Match, MatchSet, Point2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn p(x: f64, y: f64) -> Point2 {
    Point2::new(x, y)
}

const HALF: (f64, f64) = (362.0, 362.0);

#[test]
fn canonical_features_match_hand_computation() {
    let pairs = [
        (p(2.0, 2.0), p(5.0, 3.0)),
        (p(0.0, 0.0), p(1.0, 1.0)),
        (p(2.0, 0.0), p(5.0, 1.0)),
        (p(0.0, 2.0), p(1.0, 3.0)),
    ];
    // A: centroid (1, 1), squared radii all 2, scale sqrt(2)·sqrt(3).
    // B: centroid (3, 2), squared radii all 5, scale sqrt(5)·sqrt(3).
    // Members sorted by A.x then A.y: (0,0), (0,2), (2,0), (2,2).
    let sa = 6.0f64.sqrt();
    let sb = 15.0f64.sqrt();
    let want = [
        [-1.0 / sa, -1.0 / sa, -2.0 / sb, -1.0 / sb],
        [-1.0 / sa, 1.0 / sa, -2.0 / sb, 1.0 / sb],
        [1.0 / sa, -1.0 / sa, 2.0 / sb, -1.0 / sb],
        [1.0 / sa, 1.0 / sa, 2.0 / sb, 1.0 / sb],
    ];
    let got = canonicalize_subset(&pairs, HALF);
    assert_eq!(got.len(), 16);
    for (k, row) in want.iter().enumerate() {
        for c in 0..4 {
            assert!((got[4 * k + c] - row[c]).abs() < 1e-15, "{got:?}");
        }
    }
}

fn random_pairs(seed: u64) -> Vec<(Point2, Point2)> {
    let mut r = rng::from_seed(seed);
    (0..4)
        .map(|_| {
            (
                p(r.random_range(0.0..512.0), r.random_range(0.0..512.0)),
                p(r.random_range(0.0..512.0), r.random_range(0.0..512.0)),
            )
        })
        .collect()
}

#[test]
fn dyadic_shifts_and_scales_are_bit_exact() {
    let model = GccmModel::new(4, 3).unwrap();
    // Coordinates on a coarse dyadic grid keep every intermediate exact.
    let pairs: Vec<(Point2, Point2)> = [
        (0.0, 0.0, 8.0, 4.0),
        (16.0, 0.0, 24.0, 8.0),
        (0.0, 32.0, 4.0, 36.0),
        (16.0, 16.0, 28.0, 20.0),
    ]
    .iter()
    .map(|&(a, b, c, d)| (p(a, b), p(c, d)))
    .collect();
    let f = canonicalize_subset(&pairs, HALF);
    let shifted: Vec<_> = pairs
        .iter()
        .map(|&(a, b)| (a + p(64.0, -128.0), b + p(256.0, 32.0)))
        .collect();
    let scaled: Vec<_> = pairs.iter().map(|&(a, b)| (a * 2.0, b * 2.0)).collect();
    assert_eq!(canonicalize_subset(&shifted, HALF), f);
    assert_eq!(canonicalize_subset(&scaled, HALF), f);
    assert_eq!(
        model.score(&canonicalize_subset(&shifted, HALF)).to_bits(),
        model.score(&f).to_bits()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn scores_ignore_translation_scale_and_order(
        seed in any::<u64>(),
        tx in -1000.0..1000.0f64,
        ty in -1000.0..1000.0f64,
        scale_exp in -3i32..4,
    ) {
        let model = GccmModel::new(4, seed % 7).unwrap();
        let pairs = random_pairs(seed);
        let f = canonicalize_subset(&pairs, HALF);
        let c = model.score(&f);

        let shift = p(tx, ty);
        let shifted: Vec<_> = pairs.iter().map(|&(a, b)| (a + shift, b + shift)).collect();
        let fs = canonicalize_subset(&shifted, HALF);
        prop_assert!(f.iter().zip(&fs).all(|(x, y)| (x - y).abs() < 1e-12));
        prop_assert!((model.score(&fs) - c).abs() < 1e-12);

        // Powers of two scale exactly.
        let s = 2f64.powi(scale_exp);
        let scaled: Vec<_> = pairs.iter().map(|&(a, b)| (a * s, b * s)).collect();
        prop_assert_eq!(canonicalize_subset(&scaled, HALF), f.clone());

        let mut rev = pairs.clone();
        rev.reverse();
        rev.swap(0, 2);
        prop_assert_eq!(model.score(&canonicalize_subset(&rev, HALF)).to_bits(), c.to_bits());
    }
}

/// Scorer whose output is an arbitrary but fixed function of the features.
struct Wobbly;

impl SubsetScorer for Wobbly {
    fn score(&self, f: &[f64]) -> f64 {
        0.5 + 0.5 * (f.iter().enumerate().map(|(k, v)| (k + 1) as f64 * v).sum::<f64>()).sin()
    }
}

fn chain(n: usize, seed: u64) -> (MatchSet, Vec<Point2>, Vec<Point2>) {
    let mut r = rng::from_seed(seed);
    let a: Vec<Point2> = (0..n)
        .map(|_| p(r.random_range(0.0..512.0), r.random_range(0.0..512.0)))
        .collect();
    let b: Vec<Point2> = a
        .iter()
        .map(|q| *q + p(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)))
        .collect();
    let ms = MatchSet::new(n, n, (0..n).map(|k| Match { i: k, j: k, score: 0.5 }).collect()).unwrap();
    (ms, a, b)
}

#[test]
fn confidence_is_the_mean_over_containing_subsets() {
    let (ms, a, b) = chain(25, 1);
    let cfg = VerifyConfig {
        n_subsets: Some(40),
        min_coverage: 8,
        seed: 17,
        tau: 0.5,
    };
    let r = verify_with(&Wobbly, 4, &ms, &a, &b, HALF, &cfg).unwrap();
    let subsets = draw_subsets(25, 4, 40, 8, 17);
    let mut sum = [0.0; 25];
    let mut count = [0usize; 25];
    for s in &subsets {
        let pairs: Vec<_> = s.iter().map(|&x| (a[x], b[x])).collect();
        let c = Wobbly.score(&canonicalize_subset(&pairs, HALF));
        for &x in s {
            sum[x] += c;
            count[x] += 1;
        }
    }
    for k in 0..25 {
        assert_eq!(r.subsets_seen[k], count[k]);
        assert!((r.confidence[k] - sum[k] / count[k] as f64).abs() < 1e-12);
    }
}

#[test]
fn constant_scorers_keep_all_or_nothing() {
    let (ms, a, b) = chain(30, 2);
    for tau in [0.0, 0.3, 0.99] {
        let cfg = VerifyConfig {
            tau,
            ..VerifyConfig::default()
        };
        assert_eq!(
            verify_with(&ConstantScorer(1.0), 4, &ms, &a, &b, HALF, &cfg)
                .unwrap()
                .final_set,
            ms
        );
        assert!(verify_with(&ConstantScorer(0.0), 4, &ms, &a, &b, HALF, &cfg)
            .unwrap()
            .final_set
            .is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn verification_properties(
        seed in any::<u64>(),
        n in 4usize..40,
        t1 in 0.0..1.0f64,
        t2 in 0.0..1.0f64,
        min_coverage in 1usize..12,
        budget in prop::option::of(1usize..50),
    ) {
        let model = GccmModel::new(4, seed % 5).unwrap();
        let (ms, a, b) = chain(n, seed);
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let cfg = VerifyConfig { n_subsets: budget, tau: lo, min_coverage, seed };
        let r_lo = verify(&model, &ms, &a, &b, HALF, &cfg).unwrap();
        let r_hi = verify(&model, &ms, &a, &b, HALF, &VerifyConfig { tau: hi, ..cfg }).unwrap();

        prop_assert!(r_lo.subsets_seen.iter().all(|&s| s >= min_coverage));
        let kept: HashSet<(usize, usize)> = r_lo.final_set.pairs().collect();
        prop_assert!(r_hi.final_set.pairs().all(|p| kept.contains(&p)));
        prop_assert_eq!(&r_lo.with_tau(hi, min_coverage), &r_hi);

        let again = verify(&model, &ms, &a, &b, HALF, &cfg).unwrap();
        prop_assert_eq!(again, r_lo);
    }
}

fn pretrain_tasks(count: usize, seed: u64, sigma_fraction: f64) -> Vec<PairTask> {
    make_pretrain_tasks(
        &SceneConfig::default(),
        &DeformConfig::with_sigma_fraction(512, sigma_fraction),
        count,
        seed,
        &TaskOptions::geometry_only(),
    )
    .unwrap()
}

#[test]
fn training_set_construction_rules() {
    let tasks = pretrain_tasks(20, 1, 0.05);
    let zero = CorruptionConfig {
        jitter_min: 0.0,
        ..CorruptionConfig::default()
    };
    assert!(make_gccm_training_set(&tasks, 4, 10, 10, &zero, 0).is_err());
    let tight = CorruptionConfig {
        jitter_min: 20.0,
        ..CorruptionConfig::default()
    };
    assert!(make_gccm_training_set(&tasks, 4, 10, 10, &tight, 0).is_err());

    let set = make_gccm_training_set(&tasks, 4, 500, 500, &CorruptionConfig::default(), 3).unwrap();
    assert_eq!(set.len(), 1000);
    assert_eq!(set.iter().filter(|s| s.label).count(), 500);
    for s in set.iter().filter(|s| s.label) {
        let t = &tasks[s.task];
        for &g in &s.sample.member_indices {
            let (i, j) = t.gt_matches[g];
            assert!(t.gt_transform.apply(t.keypoints_a[i]).dist(t.keypoints_b[j]) <= t.gt_tolerance);
        }
    }
    let again = make_gccm_training_set(&tasks, 4, 500, 500, &CorruptionConfig::default(), 3).unwrap();
    assert_eq!(again, set);
}

fn trained() -> &'static (Vec<PairTask>, GccmTrainOutcome) {
    static CELL: OnceLock<(Vec<PairTask>, GccmTrainOutcome)> = OnceLock::new();
    CELL.get_or_init(|| {
        let tasks = pretrain_tasks(200, 10, 0.05);
        let set = make_gccm_training_set(&tasks, 4, 3000, 3000, &CorruptionConfig::default(), 11).unwrap();
        let outcome = train_gccm(&set, &default_train_config(12)).unwrap();
        (tasks, outcome)
    })
}

#[test]
fn trained_classifier_reaches_target_accuracy() {
    let (_, out) = trained();
    assert!(
        out.heldout_accuracy >= 0.85,
        "held-out accuracy {}",
        out.heldout_accuracy
    );
    assert_eq!(out.model.meta.heldout_accuracy, Some(out.heldout_accuracy));
}

#[test]
fn smoothed_training_loss_never_rises() {
    let (_, out) = trained();
    let blocks: Vec<f64> = out
        .loss_curve
        .chunks(5)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in blocks.windows(2) {
        assert!(w[1] <= w[0], "{blocks:?}");
    }
}

#[test]
fn zero_learning_rate_stays_at_chance() {
    let tasks = pretrain_tasks(40, 20, 0.05);
    let set = make_gccm_training_set(&tasks, 4, 500, 500, &CorruptionConfig::default(), 21).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..default_train_config(22)
    };
    let out = train_gccm(&set, &cfg).unwrap();
    assert!((out.heldout_accuracy - 0.5).abs() < 0.1, "{}", out.heldout_accuracy);
    assert_eq!(out.model.net(), GccmModel::new(4, 22).unwrap().net());
}

#[test]
fn same_seed_gives_identical_model_file() {
    let tasks = pretrain_tasks(30, 30, 0.05);
    let set = make_gccm_training_set(&tasks, 4, 300, 300, &CorruptionConfig::default(), 31).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..default_train_config(32)
    };
    let a = train_gccm(&set, &cfg).unwrap().model.to_json().unwrap();
    let b = train_gccm(&set, &cfg).unwrap().model.to_json().unwrap();
    assert_eq!(a, b);
    let (train, held) = split_heldout(&set, 32);
    assert_eq!(train.len() + held.len(), 600);
    assert_eq!(held.len(), 120);
}

#[test]
fn displaced_member_lowers_the_score() {
    let (_, out) = trained();
    let tasks = pretrain_tasks(50, 40, 0.02);
    let mut r = rng::from_seed(41);
    let (mut wins, mut total) = (0, 0);
    for t in &tasks {
        let half = (half_diagonal(t.image_size), half_diagonal(t.image_size));
        let mut gt = t.gt_pairs();
        gt.shuffle(&mut r);
        let good: Vec<_> = gt[..4].to_vec();
        let mut bad = good.clone();
        let a = r.random_range(0.0..std::f64::consts::TAU);
        bad[0].1 = bad[0].1 + p(50.0 * a.cos(), 50.0 * a.sin());
        let c_good = out.model.score(&canonicalize_subset(&good, half));
        let c_bad = out.model.score(&canonicalize_subset(&bad, half));
        total += 1;
        if c_good > c_bad {
            wins += 1;
        }
    }
    assert!(wins as f64 >= 0.9 * total as f64, "{wins}/{total}");
}

#[test]
fn confidence_separates_correct_from_planted_wrong() {
    let (_, out) = trained();
    let tasks = pretrain_tasks(20, 50, 0.05);
    let mut r = rng::from_seed(51);
    let (mut good, mut bad) = (Vec::new(), Vec::new());
    for t in &tasks {
        let m = t.gt_matches.len();
        let mut js: Vec<usize> = t.gt_matches.iter().map(|g| g.1).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut r);
        let wrong: Vec<usize> = order[..m * 3 / 10].to_vec();
        for (k, &w) in wrong.iter().enumerate() {
            js[w] = t.gt_matches[wrong[(k + 1) % wrong.len()]].1;
        }
        let matches = (0..m)
            .map(|k| Match {
                i: t.gt_matches[k].0,
                j: js[k],
                score: 0.5,
            })
            .collect();
        let ms = MatchSet::new(t.keypoints_a.len(), t.keypoints_b.len(), matches).unwrap();
        let half = (half_diagonal(t.image_size), half_diagonal(t.image_size));
        let res = verify(
            &out.model,
            &ms,
            &t.keypoints_a,
            &t.keypoints_b,
            half,
            &VerifyConfig::default(),
        )
        .unwrap();
        for k in 0..m {
            let correct = t
                .gt_transform
                .apply(t.keypoints_a[ms.matches[k].i])
                .dist(t.keypoints_b[ms.matches[k].j])
                <= t.gt_tolerance;
            if correct { &mut good } else { &mut bad }.push(res.confidence[k]);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let margin = mean(&good) - mean(&bad);
    assert!(margin >= 0.2, "margin {margin}: {} vs {}", mean(&good), mean(&bad));
}

#[test]
fn accuracy_of_empty_set_is_zero() {
    assert_eq!(accuracy(&GccmModel::new(4, 0).unwrap(), &[]), 0.0);
}

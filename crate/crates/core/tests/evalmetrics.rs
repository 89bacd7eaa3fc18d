use neurmatch::evalmetrics::{benchmark, precision, tre, Aggregate, MeanStd, Method, Pipeline, TreEstimator};
use neurmatch::gccm::GccmModel;
use neurmatch::synthdata::{make_pretrain_task, make_pretrain_tasks, DeformConfig, PairTask, SceneConfig, TaskOptions};
use neurmatch::{Error, Match, MatchSet};

fn geometry_task(sigma_fraction: f64, seed: u64) -> PairTask {
    let deform = DeformConfig {
        max_rotation: 0.0,
        max_scale_jitter: 0.0,
        ..DeformConfig::with_sigma_fraction(512, sigma_fraction)
    };
    make_pretrain_task(&SceneConfig::default(), &deform, seed, &TaskOptions::geometry_only()).unwrap()
}

fn gt_set(task: &PairTask) -> MatchSet {
    MatchSet::new(
        task.keypoints_a.len(),
        task.keypoints_b.len(),
        task.gt_matches
            .iter()
            .map(|&(i, j)| Match { i, j, score: 1.0 })
            .collect(),
    )
    .unwrap()
}

const EXACT: TreEstimator = TreEstimator::Tps { lambda: 0.0 };

#[test]
fn precision_counts() {
    let p = precision(&[true, true, false, true]);
    assert_eq!((p.precision, p.n_inliers, p.n_predicted), (0.75, 3, 4));
    assert_eq!(precision(&[true; 7]).precision, 1.0);
    assert_eq!(precision(&[]).precision, 0.0);
    for n in 1..60usize {
        let labels: Vec<bool> = (0..n).map(|k| k % 3 != 1).collect();
        let p = precision(&labels);
        assert_eq!((p.precision * n as f64).round() as usize, p.n_inliers);
    }
}

#[test]
fn identity_deformation_has_zero_tre() {
    let t = geometry_task(0.0, 1);
    for est in [EXACT, TreEstimator::Similarity, TreEstimator::default()] {
        let r = tre(&gt_set(&t), &t, est).unwrap();
        assert!(r.tre_gt <= 1e-9 && r.tre_pred <= 1e-9, "{est:?}: {r:?}");
    }
}

#[test]
fn known_spline_is_reproduced_within_tolerance() {
    for seed in 0..5 {
        let t = geometry_task(0.05, seed);
        let r = tre(&gt_set(&t), &t, EXACT).unwrap();
        assert!(r.tre_gt <= t.gt_tolerance, "seed {seed}: {r:?}");
    }
}

#[test]
fn a_gross_outlier_raises_tre() {
    let t = geometry_task(0.03, 4);
    let clean = gt_set(&t);
    // Re-pair two far-apart gt matches.
    let far = (1..clean.len())
        .max_by(|&u, &v| {
            let d = |k: usize| t.keypoints_b[clean.matches[k].j].dist(t.keypoints_b[clean.matches[0].j]);
            d(u).total_cmp(&d(v))
        })
        .unwrap();
    let mut bad = clean.clone();
    let (j0, jf) = (bad.matches[0].j, bad.matches[far].j);
    bad.matches[0].j = jf;
    bad.matches[far].j = j0;
    for est in [TreEstimator::default(), TreEstimator::Similarity] {
        let a = tre(&clean, &t, est).unwrap().tre_gt;
        let b = tre(&bad, &t, est).unwrap().tre_gt;
        assert!(b > a, "{est:?}: {b} <= {a}");
    }
}

#[test]
fn tre_ignores_match_order() {
    let t = geometry_task(0.05, 6);
    let set = gt_set(&t);
    let mut rev = set.clone();
    rev.matches.reverse();
    let sub = MatchSet::new(set.n_a, set.n_b, set.matches.iter().step_by(2).copied().collect()).unwrap();
    let mut sub_rev = sub.clone();
    sub_rev.matches.rotate_left(3);
    for est in [TreEstimator::default(), TreEstimator::Similarity] {
        for (x, y) in [(&set, &rev), (&sub, &sub_rev)] {
            let a = tre(x, &t, est).unwrap();
            let b = tre(y, &t, est).unwrap();
            assert!((a.tre_gt - b.tre_gt).abs() <= 1e-9 * (1.0 + a.tre_gt), "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn too_few_matches_leave_tre_undefined() {
    let t = geometry_task(0.05, 7);
    let two = MatchSet::new(
        t.keypoints_a.len(),
        t.keypoints_b.len(),
        gt_set(&t).matches[..2].to_vec(),
    )
    .unwrap();
    assert!(tre(&two, &t, TreEstimator::default()).is_none());
    assert!(tre(&two, &t, TreEstimator::Similarity).is_some());
}

fn rendered_tasks(n: usize) -> Vec<PairTask> {
    let scene = SceneConfig {
        image_size: 128,
        n_neurons: 15,
        min_separation: 12.0,
        ..SceneConfig::default()
    };
    make_pretrain_tasks(
        &scene,
        &DeformConfig::with_sigma_fraction(128, 0.02),
        n,
        3,
        &TaskOptions::default(),
    )
    .unwrap()
}

#[test]
fn aggregates_recompute_from_rows() {
    let tasks = rendered_tasks(6);
    let pipeline = Pipeline::new(None, Some(GccmModel::new(4, 1).unwrap()));
    let report = benchmark(
        &[Method::MatcherOnly, Method::MatcherGccm, Method::MatcherRansac],
        &tasks,
        &pipeline,
        9,
    )
    .unwrap();
    for m in &report.methods {
        let agg = &m.aggregate;
        assert_eq!(*agg, Aggregate::from_rows(&m.rows));
        let prec: Vec<f64> = m.rows.iter().map(|r| r.precision).collect();
        let mean = prec.iter().sum::<f64>() / prec.len() as f64;
        assert!((agg.precision.mean - mean).abs() <= 1e-12);
        let inl: usize = m.rows.iter().map(|r| r.n_inliers).sum();
        let pred: usize = m.rows.iter().map(|r| r.n_predicted).sum();
        assert!((agg.pooled_precision - inl as f64 / pred.max(1) as f64).abs() <= 1e-12);
        for r in &m.rows {
            assert_eq!((r.precision * r.n_predicted as f64).round() as usize, r.n_inliers);
        }
    }
}

#[test]
fn duplicate_registrations_agree() {
    let tasks = rendered_tasks(4);
    let report = benchmark(
        &[Method::MatcherOnly, Method::MatcherOnly],
        &tasks,
        &Pipeline::new(None, None),
        1,
    )
    .unwrap();
    let [a, b] = [&report.methods[0], &report.methods[1]].map(|m| {
        let mut m = m.clone();
        m.rows.iter_mut().for_each(|r| r.wall_time = 0.0);
        m
    });
    assert_eq!(a, b);
}

#[test]
fn reports_are_reproducible_and_keep_timing_separate() {
    let tasks = rendered_tasks(3);
    let pipeline = Pipeline::new(None, None);
    let a = benchmark(&[Method::MatcherOnly, Method::MatcherRansac], &tasks, &pipeline, 2).unwrap();
    let b = benchmark(&[Method::MatcherOnly, Method::MatcherRansac], &tasks, &pipeline, 2).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert!(!a.to_json().unwrap().contains("wall_time"));
    let timing: serde_json::Value = serde_json::from_str(&a.timing_json().unwrap()).unwrap();
    assert!(timing.get("matcher-only").is_some(), "{timing}");
}

#[test]
fn missing_models_fail_rows_not_the_run() {
    let tasks = rendered_tasks(2);
    let report = benchmark(&[Method::MatcherGccm], &tasks, &Pipeline::new(None, None), 0).unwrap();
    let agg = &report.methods[0].aggregate;
    assert_eq!((agg.n_tasks, agg.n_failed), (2, 2));
}

#[test]
fn empty_task_list_is_an_error() {
    assert!(matches!(
        benchmark(&[Method::MatcherOnly], &[], &Pipeline::new(None, None), 0),
        Err(Error::Argument(_))
    ));
}

#[test]
fn mean_std_of_known_values() {
    let m = MeanStd::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!((m.mean, m.std), (5.0, 2.0));
    assert_eq!(MeanStd::of(&[]), MeanStd { mean: 0.0, std: 0.0 });
}

#[test]
fn method_tags_round_trip() {
    for m in Method::ALL {
        assert_eq!(Method::parse(m.tag()).unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.tag()));
    }
    assert!(Method::parse("matcher+magic").is_err());
}

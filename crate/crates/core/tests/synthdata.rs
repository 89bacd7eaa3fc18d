use std::collections::HashSet;

use neurmatch::geometry::TransformJson;
use neurmatch::synthdata::{
    generate_scene, generate_scene_geometry, load_task, make_crossmodal_task, make_pretrain_task, make_pretrain_tasks,
    render_modality, sample_deformation, save_task, AugmentConfig, DeformConfig, ModalityStyle, SceneConfig,
    TaskOptions, DISPLACEMENT_TRUNCATION,
};
use neurmatch::Point2;

fn scene(seed: u64) -> SceneConfig {
    SceneConfig {
        seed,
        ..SceneConfig::default()
    }
}

fn serialized(t: &neurmatch::ThinPlateSpline) -> String {
    serde_json::to_string(&TransformJson::from(t)).unwrap()
}

#[test]
fn fifty_keypoints_inside_the_image() {
    for seed in 0..5 {
        let s = generate_scene(&scene(seed)).unwrap();
        assert_eq!(s.keypoints.len(), 50);
        assert!(s.keypoints.iter().all(|p| s.image.contains(*p)));
        assert_eq!(generate_scene_geometry(&scene(seed)).unwrap(), s.keypoints);
    }
}

#[test]
fn keypoints_are_never_closer_than_two_pixels() {
    let cfg = SceneConfig {
        n_neurons: 200,
        min_separation: 2.0,
        image_size: 128,
        margin: 2.0,
        ..SceneConfig::default()
    };
    for seed in 0..10 {
        let kps = generate_scene_geometry(&SceneConfig { seed, ..cfg.clone() }).unwrap();
        for i in 0..kps.len() {
            for j in i + 1..kps.len() {
                assert!(kps[i].dist(kps[j]) >= 2.0);
            }
        }
    }
}

#[test]
fn modalities_differ_in_appearance() {
    let mut total = 0.0;
    for seed in 0..20 {
        let s = generate_scene(&SceneConfig {
            image_size: 256,
            n_neurons: 25,
            seed,
            ..SceneConfig::default()
        })
        .unwrap();
        let a = render_modality(&s.image, &ModalityStyle::modality_a(), seed).unwrap();
        let b = render_modality(&s.image, &ModalityStyle::modality_b(), seed).unwrap();
        let d = a.mean_abs_diff(&b);
        assert!(d > 0.05, "seed {seed}: {d}");
        total += d;
    }
    assert!(total / 20.0 > 0.05);
}

#[test]
fn control_displacements_are_truncated() {
    let sigma = 5.0;
    let cfg = DeformConfig {
        displacement_sigma: sigma,
        max_rotation: 0.0,
        max_scale_jitter: 0.0,
        ..DeformConfig::default()
    };
    for seed in 0..200 {
        let t = sample_deformation(&cfg, 512, seed).unwrap();
        for c in t.control_points() {
            let d = t.apply(*c).dist(*c);
            assert!(d < 6.0 * sigma);
            assert!(d <= DISPLACEMENT_TRUNCATION * sigma + 1e-9, "seed {seed}: {d}");
        }
    }
}

#[test]
fn hundred_seeds_give_distinct_transforms() {
    let cfg = DeformConfig::default();
    let all: HashSet<String> = (0..100)
        .map(|seed| serialized(&sample_deformation(&cfg, 512, seed).unwrap()))
        .collect();
    assert_eq!(all.len(), 100);
}

#[test]
fn same_seed_same_transform() {
    let cfg = DeformConfig::default();
    let a = serialized(&sample_deformation(&cfg, 512, 17).unwrap());
    let b = serialized(&sample_deformation(&cfg, 512, 17).unwrap());
    assert_eq!(a, b);
}

#[test]
fn augmentation_grid_sizes() {
    let opts = TaskOptions::geometry_only();
    let one = AugmentConfig {
        rotations: 1,
        contrast_variants: 1,
        ..AugmentConfig::default()
    };
    let tasks = make_crossmodal_task(&scene(0), &DeformConfig::default(), &one, 3, &opts).unwrap();
    assert_eq!(tasks.len(), 1);
    let tasks = make_crossmodal_task(&scene(0), &DeformConfig::default(), &AugmentConfig::default(), 3, &opts).unwrap();
    assert_eq!(tasks.len(), 50);
    for t in &tasks {
        t.validate().unwrap();
    }
    let empty = AugmentConfig {
        rotations: 0,
        ..AugmentConfig::default()
    };
    assert!(make_crossmodal_task(&scene(0), &DeformConfig::default(), &empty, 3, &opts).is_err());
}

/// Every keypoint that stays inside the image after warping is a gt match;
/// everything else is gone from side B.
fn check_coverage(task: &neurmatch::synthdata::PairTask) {
    let hi = (task.image_size - 1) as f64;
    let inside = |p: Point2| p.x >= 0.0 && p.y >= 0.0 && p.x <= hi && p.y <= hi;
    let expected: Vec<usize> = (0..task.keypoints_a.len())
        .filter(|&i| inside(task.gt_transform.apply(task.keypoints_a[i])))
        .collect();
    let got: Vec<usize> = task.gt_matches.iter().map(|m| m.0).collect();
    assert_eq!(got, expected);
    assert_eq!(task.keypoints_b.len(), task.gt_matches.len());
    let js: HashSet<usize> = task.gt_matches.iter().map(|m| m.1).collect();
    assert_eq!(js.len(), task.keypoints_b.len());
}

#[test]
fn gt_matches_cover_every_surviving_keypoint() {
    let strong = DeformConfig::with_sigma_fraction(512, 0.1);
    let opts = TaskOptions::geometry_only();
    for t in make_pretrain_tasks(&scene(0), &strong, 30, 5, &opts).unwrap() {
        check_coverage(&t);
    }
    for t in make_crossmodal_task(&scene(0), &strong, &AugmentConfig::default(), 8, &opts).unwrap() {
        check_coverage(&t);
    }
}

#[test]
fn generation_is_a_pure_function_of_the_seed() {
    let opts = TaskOptions::geometry_only();
    let a = make_pretrain_task(&scene(0), &DeformConfig::default(), 21, &opts).unwrap();
    let b = make_pretrain_task(&scene(0), &DeformConfig::default(), 21, &opts).unwrap();
    assert_eq!(a.keypoints_a, b.keypoints_a);
    assert_eq!(a.keypoints_b, b.keypoints_b);
    assert_eq!(a.gt_matches, b.gt_matches);
    assert_eq!(serialized(&a.gt_transform), serialized(&b.gt_transform));
}

#[test]
fn saved_task_loads_back_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let opts = TaskOptions {
        keep_images: true,
        ..TaskOptions::default()
    };
    let cfg = SceneConfig {
        image_size: 128,
        n_neurons: 12,
        seed: 0,
        ..SceneConfig::default()
    };
    let task = make_pretrain_task(&cfg, &DeformConfig::with_sigma_fraction(128, 0.03), 4, &opts).unwrap();
    save_task(&task, dir.path()).unwrap();
    let back = load_task(dir.path()).unwrap();
    assert_eq!(back.keypoints_a, task.keypoints_a);
    assert_eq!(back.keypoints_b, task.keypoints_b);
    assert_eq!(back.gt_matches, task.gt_matches);
    assert_eq!(back.meta, task.meta);
    assert_eq!(serialized(&back.gt_transform), serialized(&task.gt_transform));
    assert_eq!(back.descriptors_a, task.descriptors_a);
    assert_eq!(back.descriptors_b, task.descriptors_b);
    assert!(back.images.is_some());
}

#[test]
fn geometry_only_tasks_cannot_be_saved() {
    let dir = tempfile::tempdir().unwrap();
    let task = make_pretrain_task(&scene(0), &DeformConfig::default(), 4, &TaskOptions::geometry_only()).unwrap();
    assert!(save_task(&task, dir.path()).is_err());
}

use pcd_core::boxes::{evaluate_ap, iou3d, nms_bev, RecallPositions, SceneTruth, ScoredBox};
use pcd_core::data::{augment, decode_scene, encode_scene, generate_scene, SceneGenConfig};
use pcd_core::detector::{class_mean_anchors, predict, train, DetectorModel, Role};
use pcd_core::sampling::{ball_query, dist, QueryCounter};
use pcd_core::{Box3D, PipelineConfig, SeededRng, TrainConfig};
use proptest::prelude::*;

fn small_scenes(n: u64) -> (SceneGenConfig, Vec<pcd_core::LabeledScene>) {
    let cfg = SceneGenConfig {
        extent: [16.0, 16.0, 4.0],
        min_objects: 2,
        max_objects: 3,
        surface_density: 6.0,
        clutter_density: 0.3,
        noise_points: 20,
        ..SceneGenConfig::default()
    };
    let scenes = (0..n).map(|s| generate_scene(&cfg, s).unwrap()).collect();
    (cfg, scenes)
}

#[test]
fn ball_query_matches_brute_force() {
    let mut rng = SeededRng::new(4);
    let coords: Vec<[f64; 3]> = (0..400)
        .map(|_| [rng.range(-5.0, 5.0), rng.range(-5.0, 5.0), rng.range(0.0, 2.0)])
        .collect();
    let centers: Vec<[f64; 3]> = coords.iter().step_by(17).copied().collect();
    let counter = QueryCounter::new();
    for (r, k) in [(0.3, 4), (1.0, 16), (2.5, 64)] {
        let groups = ball_query(&centers, &coords, r, k, &counter).unwrap();
        for (c, g) in centers.iter().zip(&groups) {
            let mut near: Vec<usize> = (0..coords.len()).filter(|&i| dist(&coords[i], c) <= r).collect();
            near.truncate(k);
            assert_eq!(g.unique_members(), near.as_slice());
            assert_eq!(g.members.len(), k);
            assert_eq!(g.padded, near.len() < k);
        }
    }
    assert_eq!(counter.get(), 3 * centers.len() as u64);
}

#[test]
fn scenes_survive_encoding_and_augmentation_keeps_labels() {
    let (_, scenes) = small_scenes(5);
    let mut rng = SeededRng::new(8);
    for s in &scenes {
        let back = decode_scene(&encode_scene(s)).unwrap();
        assert_eq!(&back, s);
        let a = augment(s, &mut rng).unwrap();
        assert_eq!(a.classes, s.classes);
        assert_eq!(a.boxes.len(), s.boxes.len());
        let inside = |sc: &pcd_core::LabeledScene| sc.point_labels().iter().filter(|l| l.is_some()).count();
        assert!(inside(&a) > 0);
    }
}

#[test]
fn ground_truth_as_predictions_scores_full_ap() {
    let (_, scenes) = small_scenes(6);
    let truth: Vec<SceneTruth> = scenes
        .iter()
        .map(|s| SceneTruth {
            boxes: s.boxes.clone(),
            classes: s.classes.clone(),
        })
        .collect();
    let preds: Vec<ScoredBox> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.boxes.iter().zip(&s.classes).map(move |(b, &c)| ScoredBox {
                scene: i,
                class: c,
                score: 1.0,
                bbox: *b,
            })
        })
        .collect();
    for rp in [RecallPositions::R11, RecallPositions::R40] {
        for ap in evaluate_ap(&preds, &truth, 2, &[0.7, 0.5], rp) {
            assert_eq!(ap, Some(1.0));
        }
    }
}

proptest! {
    #[test]
    fn nms_leaves_no_overlapping_pair(seed in 0u64..10_000, n in 1usize..40, thr in 0.05f64..0.8) {
        let mut rng = SeededRng::new(seed);
        let boxes: Vec<Box3D> = (0..n)
            .map(|_| {
                Box3D::new(
                    rng.range(-4.0, 4.0),
                    rng.range(-4.0, 4.0),
                    0.0,
                    rng.range(0.5, 2.0),
                    rng.range(1.0, 4.0),
                    1.5,
                    rng.range(-3.1, 3.1),
                )
                .unwrap()
            })
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let keep = nms_bev(&boxes, &scores, thr);
        prop_assert!(!keep.is_empty());
        for w in keep.windows(2) {
            prop_assert!(scores[w[0]] >= scores[w[1]]);
        }
        for (i, &a) in keep.iter().enumerate() {
            for &b in &keep[i + 1..] {
                prop_assert!(pcd_core::boxes::bev_iou(&boxes[a], &boxes[b]) <= thr);
            }
        }
        // Every dropped box overlaps some kept box with a higher score.
        for d in (0..n).filter(|i| !keep.contains(i)) {
            prop_assert!(keep.iter().any(|&k| scores[k] >= scores[d] && pcd_core::boxes::bev_iou(&boxes[k], &boxes[d]) > thr));
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed);
        let mut b = || Box3D::new(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-0.5, 0.5),
            rng.range(0.3, 3.0), rng.range(0.3, 3.0), rng.range(0.3, 3.0), rng.range(-3.1, 3.1)).unwrap();
        let (x, y) = (b(), b());
        let (v, w) = (iou3d(&x, &y), iou3d(&y, &x));
        prop_assert!((v - w).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou3d(&x, &x) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn short_training_is_deterministic_and_predicts_finite_boxes() {
    let (_, scenes) = small_scenes(3);
    let cfg = PipelineConfig::toy();
    let anchors = class_mean_anchors(&scenes, cfg.n_classes);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = DetectorModel::new(Role::Student, cfg.clone(), anchors.clone(), 5).unwrap();
        let reports = train(&mut m, None, &scenes, &tc, 0.0, 1.0, 5, |_, _| Ok(true)).unwrap();
        (m, reports)
    };
    let (m1, r1) = run();
    let (_, r2) = run();
    assert_eq!(r1.len(), 2);
    for (a, b) in r1.iter().zip(&r2) {
        assert_eq!(a.loss.values(), b.loss.values());
    }
    let d = predict(&m1, &scenes[0].cloud, 0.0, 0.1).unwrap();
    assert!(d.boxes.iter().all(|b| b.to_array().iter().all(|v| v.is_finite())));
    assert!(d.scores.iter().all(|s| (0.0..=1.0).contains(s)));
}

mod common;

use common::{ap_threshold_sweep, match_reference, rng};
use pyramid_rfcn::boxes::{overlap, BBox};
use pyramid_rfcn::eval::{
    average_precision, average_recall, classified_eval, evaluate_classes, match_detections, DetectionRecord, EvalLevel,
    GroundTruth, Outcome, PrCurve, Task, MATCH_IOU,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn jitter(r: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let mut d = || r.random_range(-amount..amount);
    let (x0, y0) = (b.x_min + d(), b.y_min + d());
    BBox::new(x0, y0, (b.x_max + d()).max(x0 + 1.0), (b.y_max + d()).max(y0 + 1.0))
}

/// Random scene: gts of varied height over a few images and classes, with
/// detections near gts (some duplicated) plus stray boxes.
fn scene(seed: u64) -> (Vec<DetectionRecord>, Vec<GroundTruth>) {
    let mut r = rng(seed);
    let mut gts = Vec::new();
    for img in 0..r.random_range(1..4) {
        for _ in 0..r.random_range(0..6) {
            let h = r.random_range(8.0..90.0);
            let x = r.random_range(0.0..200.0);
            let y = r.random_range(0.0..200.0);
            gts.push(GroundTruth {
                image_id: format!("i{img}"),
                class_id: r.random_range(1..=2),
                bbox: BBox::new(x, y, x + h * r.random_range(0.6..1.4), y + h),
            });
        }
    }
    let mut dets = Vec::new();
    for g in &gts {
        for _ in 0..r.random_range(0..3) {
            let amount = r.random_range(0.5..(0.3 * g.bbox.height()).max(1.0));
            dets.push(DetectionRecord {
                image_id: g.image_id.clone(),
                class_id: if r.random_bool(0.85) { g.class_id } else { 3 - g.class_id },
                score: (r.random_range(0..20) as f64) / 20.0,
                bbox: jitter(&mut r, &g.bbox, amount),
            });
        }
    }
    for _ in 0..r.random_range(0..6) {
        let x = r.random_range(0.0..250.0);
        let y = r.random_range(0.0..250.0);
        dets.push(DetectionRecord {
            image_id: format!("i{}", r.random_range(0..3)),
            class_id: r.random_range(1..=2),
            score: r.random_range(0.0..1.0),
            bbox: BBox::new(x, y, x + 20.0, y + 30.0),
        });
    }
    (dets, gts)
}

fn outcome_flags(outcomes: &[Outcome]) -> Vec<(bool, bool)> {
    outcomes
        .iter()
        .map(|o| (*o == Outcome::TruePositive, *o == Outcome::Ignored))
        .collect()
}

#[test]
fn overlap_fixtures() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    assert_eq!(overlap(&a, &a).unwrap(), 1.0);
    assert_eq!(overlap(&a, &BBox::new(20.0, 0.0, 30.0, 10.0)).unwrap(), 0.0);
    assert_eq!(overlap(&a, &BBox::new(5.0, 0.0, 15.0, 10.0)).unwrap(), 50.0 / 150.0);
    assert!(overlap(&a, &BBox::new(5.0, 5.0, 5.0, 9.0)).is_err());
}

#[test]
fn matching_agrees_with_brute_force() {
    for seed in 0..300 {
        let (dets, gts) = scene(seed);
        for level in [EvalLevel::all(), EvalLevel::l2(), EvalLevel::l1()] {
            let got = match_detections(&dets, &gts, MATCH_IOU, &level);
            let (flags, taken) = match_reference(&dets, &gts, |g| level.admits(g));
            assert_eq!(outcome_flags(&got.outcomes), flags, "seed {seed} level {}", level.name);
            assert_eq!(got.gt_matched, taken, "seed {seed}");
        }
    }
}

#[test]
fn no_gt_is_matched_twice() {
    for seed in 0..200 {
        let (dets, gts) = scene(seed);
        let m = match_detections(&dets, &gts, MATCH_IOU, &EvalLevel::all());
        let tps = m.outcomes.iter().filter(|o| **o == Outcome::TruePositive).count();
        assert_eq!(tps, m.gt_matched.iter().filter(|t| **t).count());
    }
}

#[test]
fn ap_agrees_with_threshold_sweep() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let n = r.random_range(1..40);
        let gt_count = r.random_range(1..30);
        let mut tps = 0;
        let scored: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let tp = tps < gt_count && r.random_bool(0.5);
                tps += usize::from(tp);
                ((r.random_range(0..10) as f64) / 10.0, tp)
            })
            .collect();
        let outcomes: Vec<Outcome> = scored
            .iter()
            .map(|s| if s.1 { Outcome::TruePositive } else { Outcome::FalsePositive })
            .collect();
        let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
        let ap = average_precision(&PrCurve::from_outcomes(&scores, &outcomes, gt_count, 1)).unwrap();
        let oracle = ap_threshold_sweep(&scored, gt_count);
        assert!((ap - oracle).abs() <= 1e-12, "seed {seed}: {ap} vs {oracle}");
    }
}

#[test]
fn metrics_depend_only_on_score_ranks() {
    for seed in 0..50 {
        let (dets, gts) = scene(seed);
        let warped: Vec<DetectionRecord> = dets
            .iter()
            .map(|d| DetectionRecord {
                score: (3.0 * d.score).exp() - 7.0,
                ..d.clone()
            })
            .collect();
        let a = evaluate_classes(&dets, &gts, &[1, 2], &EvalLevel::all(), 3);
        let b = evaluate_classes(&warped, &gts, &[1, 2], &EvalLevel::all(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ap, y.ap, "seed {seed}");
            assert_eq!(x.ar, y.ar, "seed {seed}");
        }
    }
}

#[test]
fn low_scored_false_positive_never_raises_ap() {
    for seed in 0..100 {
        let (mut dets, gts) = scene(seed);
        let before = evaluate_classes(&dets, &gts, &[1], &EvalLevel::all(), 3);
        dets.push(DetectionRecord {
            image_id: "i0".into(),
            class_id: 1,
            score: -1.0,
            bbox: BBox::new(500.0, 500.0, 510.0, 510.0),
        });
        let after = evaluate_classes(&dets, &gts, &[1], &EvalLevel::all(), 3);
        if let (Some(b), Some(a)) = (before[0].ap, after[0].ap) {
            assert!(a <= b, "seed {seed}: {b} -> {a}");
        }
    }
}

#[test]
fn two_detections_on_one_gt() {
    let g = BBox::new(0.0, 0.0, 40.0, 40.0);
    let gts = vec![GroundTruth {
        image_id: "a".into(),
        class_id: 1,
        bbox: g,
    }];
    let dets: Vec<DetectionRecord> = [0.9, 0.8]
        .iter()
        .map(|&s| DetectionRecord {
            image_id: "a".into(),
            class_id: 1,
            score: s,
            bbox: g,
        })
        .collect();
    let m = match_detections(&dets, &gts, MATCH_IOU, &EvalLevel::all());
    assert_eq!(m.outcomes, vec![Outcome::TruePositive, Outcome::FalsePositive]);
    let curve = PrCurve::from_match(&dets, &m, 1);
    assert_eq!(average_precision(&curve), Some(1.0));
    assert_eq!(average_recall(&curve), Some(1.0));
}

fn left_right() -> Vec<Task> {
    vec![Task {
        name: "L-R".into(),
        labels: BTreeMap::from([(1, "left".to_string()), (2, "right".to_string())]),
    }]
}

#[test]
fn correct_labels_give_detection_ap() {
    for seed in 0..30 {
        let (dets, gts) = scene(seed);
        let det = evaluate_classes(&dets, &gts, &[1, 2], &EvalLevel::all(), 3);
        let task = classified_eval(&dets, &gts, &left_right(), &EvalLevel::all(), 3).unwrap();
        assert_eq!(task[0].per_label[0].1, det[0].ap);
        assert_eq!(task[0].per_label[1].1, det[1].ap);
    }
}

#[test]
fn flipped_labels_give_zero_ap() {
    let (dets, gts) = scene(11);
    let perfect: Vec<DetectionRecord> = gts
        .iter()
        .map(|g| DetectionRecord {
            image_id: g.image_id.clone(),
            class_id: 3 - g.class_id,
            score: 0.9,
            bbox: g.bbox,
        })
        .collect();
    assert!(!dets.is_empty());
    let t = classified_eval(&perfect, &gts, &left_right(), &EvalLevel::all(), 3).unwrap();
    for (_, ap, _) in &t[0].per_label {
        assert!(ap.is_none_or(|v| v == 0.0));
    }
    assert!(t[0].mean_ap.is_some_and(|v| v == 0.0));
}

#[test]
fn mirrored_two_class_dataset_is_symmetric() {
    let (dets, gts) = scene(5);
    let flip = |c: usize| 3 - c;
    let mirror_box = |b: &BBox| BBox::new(1000.0 - b.x_max, b.y_min, 1000.0 - b.x_min, b.y_max);
    let mut all_dets = dets.clone();
    let mut all_gts = gts.clone();
    all_dets.extend(dets.iter().map(|d| DetectionRecord {
        image_id: format!("m{}", d.image_id),
        class_id: flip(d.class_id),
        bbox: mirror_box(&d.bbox),
        ..d.clone()
    }));
    all_gts.extend(gts.iter().map(|g| GroundTruth {
        image_id: format!("m{}", g.image_id),
        class_id: flip(g.class_id),
        bbox: mirror_box(&g.bbox),
    }));
    let t = classified_eval(&all_dets, &all_gts, &left_right(), &EvalLevel::all(), 6).unwrap();
    let (l, r) = (&t[0].per_label[0], &t[0].per_label[1]);
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() < 1e-12,
        (x, y) => x == y,
    };
    assert!(close(l.1, r.1), "{l:?} vs {r:?}");
    assert!(close(l.2, r.2), "{l:?} vs {r:?}");
}

use super::map::{evaluate_map, write_map_csv, ClassMetrics, GtBox, COCO_THRESHOLDS};
use super::*;
use crate::scenegen::{generate_dataset, SceneConfig};
use rand::seq::SliceRandom;
use rand::Rng;

fn tiny_scene_cfg(size: usize) -> SceneConfig {
    SceneConfig {
        image_size: size,
        min_objects: 1,
        max_objects: 3,
        max_occlusion: 0.0,
        min_scale: 0.25,
        max_scale: 0.4,
        ..Default::default()
    }
}

fn det(cat: Category, conf: f32, b: [f32; 4]) -> Detection {
    Detection { bbox: BBox::new(b[0], b[1], b[2], b[3]), category: cat, confidence: conf }
}

fn gt(cat: Category, b: [f32; 4]) -> GtBox {
    GtBox { category: cat, bbox: BBox::new(b[0], b[1], b[2], b[3]) }
}

#[test]
fn detect_with_threshold_one_is_empty() {
    let model = GridDetector::new(DetectorArch::default(), 3).unwrap();
    let scene = crate::scenegen::generate_scene(1, &tiny_scene_cfg(32)).unwrap();
    let dets = model.detect(&scene.image, 1.0, 0.5).unwrap();
    assert!(dets.is_empty());
    // Threshold 0 keeps every cell.
    let all = model.detect(&scene.image, 0.0, 1.0).unwrap();
    assert_eq!(all.len(), model.arch.grid() * model.arch.grid());
}

#[test]
fn nms_keeps_only_top_of_identical_boxes() {
    let b = [4.0, 4.0, 12.0, 12.0];
    let kept = nms(
        vec![det(Category::Circle, 0.8, b), det(Category::Circle, 0.9, b)],
        0.5,
    );
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].confidence, 0.9);
    // Same boxes, different classes: both survive per-class NMS.
    let kept = nms(
        vec![det(Category::Circle, 0.8, b), det(Category::Square, 0.9, b)],
        0.5,
    );
    assert_eq!(kept.len(), 2);
}

#[test]
fn nms_is_input_order_independent() {
    let mut rng = crate::rng::stream(10, "nms-order", 0);
    for trial in 0..20 {
        let mut dets: Vec<Detection> = (0..12)
            .map(|i| {
                let x = rng.gen_range(0.0..24.0);
                let y = rng.gen_range(0.0..24.0);
                let w = rng.gen_range(4.0..10.0);
                let h = rng.gen_range(4.0..10.0);
                let cat = Category::ALL[rng.gen_range(0..3)];
                // Distinct confidences by construction.
                det(cat, 0.5 + i as f32 * 0.02, [x, y, x + w, y + h])
            })
            .collect();
        let a = nms(dets.clone(), 0.4);
        dets.shuffle(&mut rng);
        let b = nms(dets, 0.4);
        assert_eq!(a, b, "trial {trial}");
    }
}

/// Independent f64 scalar decoder: plain softmax without max-subtraction,
/// explicit per-cell loops.
fn naive_decode(head: &[f32], arch: &DetectorArch) -> Vec<(f64, usize, [f64; 4])> {
    let s = arch.grid();
    let hw = s * s;
    let k = arch.num_classes;
    let cell = arch.image_size as f64 / s as f64;
    let size = arch.image_size as f64;
    let mut out = Vec::new();
    for gy in 0..s {
        for gx in 0..s {
            let v = |c: usize| head[c * hw + gy * s + gx] as f64;
            let obj = 1.0 / (1.0 + (-v(0)).exp());
            let mut denom = 0.0;
            for ci in 0..k {
                denom += v(1 + ci).exp();
            }
            let mut best = 0;
            for ci in 1..k {
                if v(1 + ci) > v(1 + best) {
                    best = ci;
                }
            }
            let prob = v(1 + best).exp() / denom;
            let conf = obj * prob;
            let sx = 1.0 / (1.0 + (-v(1 + k)).exp());
            let sy = 1.0 / (1.0 + (-v(1 + k + 1)).exp());
            let cx = (gx as f64 + sx) * cell;
            let cy = (gy as f64 + sy) * cell;
            let w = v(1 + k + 2).min(4.0).exp() * size;
            let h = v(1 + k + 3).min(4.0).exp() * size;
            let clamp = |x: f64| x.clamp(0.0, size);
            out.push((
                conf,
                best,
                [clamp(cx - w / 2.0), clamp(cy - h / 2.0), clamp(cx + w / 2.0), clamp(cy + h / 2.0)],
            ));
        }
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

#[test]
fn decode_matches_independent_scalar_reference() {
    let arch = DetectorArch { image_size: 32, channels: 8, num_classes: 3 };
    for seed in 0..5u64 {
        let mut rng = crate::rng::stream(seed, "decode-fixture", 0);
        let head = crate::init::normal(&mut rng, arch.head_channels() * arch.grid() * arch.grid(), 1.5);
        let got = decode_grid(&head, &arch, 0.0);
        let want = naive_decode(&head, &arch);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g.confidence as f64 - w.0).abs() < 1e-5, "conf {} vs {}", g.confidence, w.0);
            assert_eq!(g.category, Category::ALL[w.1]);
            let gb = [g.bbox.x_min, g.bbox.y_min, g.bbox.x_max, g.bbox.y_max];
            for (a, b) in gb.iter().zip(&w.2) {
                assert!((*a as f64 - b).abs() < 1e-3, "box {a} vs {b}");
            }
        }
    }
}

#[test]
fn training_overfits_a_single_scene() {
    let scenes = generate_dataset(5, 1, &tiny_scene_cfg(16)).unwrap();
    let arch = DetectorArch { image_size: 16, ..Default::default() };
    let mut model = GridDetector::new(arch, 0).unwrap();
    let cfg = DetectorTrainConfig {
        steps: 120,
        batch_size: 2,
        lr: 3e-3,
        warmup: 10,
        ..Default::default()
    };
    let log = train_detector(&mut model, &scenes, &cfg).unwrap();
    let first = log.losses[0];
    let last = *log.losses.last().unwrap();
    assert!(last < first, "loss did not decrease: {first} -> {last}");
    assert!(last < 0.5 * first, "loss barely moved: {first} -> {last}");
}

#[test]
fn duplicate_dataset_reaches_same_metrics() {
    let scenes = generate_dataset(21, 4, &tiny_scene_cfg(16)).unwrap();
    let mut doubled = scenes.clone();
    doubled.extend(scenes.iter().cloned());
    let arch = DetectorArch { image_size: 16, ..Default::default() };
    let cfg = DetectorTrainConfig {
        steps: 250,
        batch_size: 4,
        lr: 3e-3,
        warmup: 10,
        ..Default::default()
    };
    let mut a = GridDetector::new(arch, 7).unwrap();
    train_detector(&mut a, &scenes, &cfg).unwrap();
    let mut b = GridDetector::new(arch, 7).unwrap();
    train_detector(&mut b, &doubled, &cfg).unwrap();
    let map_a = evaluate_on(&a, &scenes, 0.3, 0.5, &[0.5]).unwrap().map;
    let map_b = evaluate_on(&b, &scenes, 0.3, 0.5, &[0.5]).unwrap().map;
    assert!(
        (map_a - map_b).abs() <= 0.01,
        "duplicate-dataset mAP drift: {map_a} vs {map_b}"
    );
}

#[test]
fn training_checkpoint_is_byte_deterministic() {
    let scenes = generate_dataset(9, 2, &tiny_scene_cfg(16)).unwrap();
    let arch = DetectorArch { image_size: 16, ..Default::default() };
    let cfg = DetectorTrainConfig { steps: 25, batch_size: 2, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for run in 0..2 {
        let mut model = GridDetector::new(arch, 11).unwrap();
        train_detector(&mut model, &scenes, &cfg).unwrap();
        let p = dir.path().join(format!("det{run}.pdck"));
        model.save(&p).unwrap();
        paths.push(p);
    }
    let a = std::fs::read(&paths[0]).unwrap();
    let b = std::fs::read(&paths[1]).unwrap();
    assert_eq!(a, b, "checkpoints differ between identical runs");
}

#[test]
fn save_load_roundtrip_preserves_behavior() {
    let model = GridDetector::new(DetectorArch::default(), 13).unwrap();
    let scene = crate::scenegen::generate_scene(2, &tiny_scene_cfg(32)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("det.pdck");
    model.save(&p).unwrap();
    let loaded = GridDetector::load(&p).unwrap();
    assert_eq!(loaded.arch, model.arch);
    let a = model.detect(&scene.image, 0.0, 0.5).unwrap();
    let b = loaded.detect(&scene.image, 0.0, 0.5).unwrap();
    assert_eq!(a, b);
    let fa = model.features(&scene.image).unwrap();
    assert_eq!(fa.len(), model.arch.feature_dim());
}

#[test]
fn wrong_image_size_is_rejected() {
    let model = GridDetector::new(DetectorArch::default(), 0).unwrap();
    let scene = crate::scenegen::generate_scene(1, &tiny_scene_cfg(16)).unwrap();
    assert!(matches!(
        model.detect(&scene.image, 0.5, 0.5),
        Err(Error::Detector(_))
    ));
    let arch = DetectorArch { image_size: 20, ..Default::default() };
    assert!(GridDetector::new(arch, 0).is_err());
}

#[test]
fn map_perfect_and_empty_cases() {
    let gts = vec![
        vec![gt(Category::Circle, [0.0, 0.0, 10.0, 10.0]), gt(Category::Square, [20.0, 0.0, 30.0, 10.0])],
        vec![gt(Category::Circle, [5.0, 5.0, 15.0, 15.0])],
    ];
    let perfect: Vec<DetectionSet> = gts
        .iter()
        .map(|g| g.iter().map(|x| det(x.category, 1.0, [x.bbox.x_min, x.bbox.y_min, x.bbox.x_max, x.bbox.y_max])).collect())
        .collect();
    let r = evaluate_map(&perfect, &gts, &COCO_THRESHOLDS).unwrap();
    assert!((r.map - 1.0).abs() < 1e-6, "perfect mAP {}", r.map);
    assert!((r.ap50 - 1.0).abs() < 1e-6);

    let empty: Vec<DetectionSet> = vec![Vec::new(), Vec::new()];
    let r = evaluate_map(&empty, &gts, &COCO_THRESHOLDS).unwrap();
    assert_eq!(r.map, 0.0);
}

/// Hand-enumerated staircase: 3 GT, 5 detections (TP, FP, TP, FP, TP).
/// Cumulative (P, R): (1, 1/3) (1/2, 1/3) (2/3, 2/3) (1/2, 2/3) (3/5, 1).
/// All-point AP = 1/3 * 1 + 1/3 * 2/3 + 1/3 * 3/5 = 34/45.
#[test]
fn map_matches_hand_enumerated_fixture() {
    let g = [[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0], [40.0, 40.0, 50.0, 50.0]];
    let gts = vec![g.iter().map(|b| gt(Category::Circle, *b)).collect::<Vec<_>>()];
    let dets = vec![vec![
        det(Category::Circle, 0.95, g[0]),
        det(Category::Circle, 0.90, [100.0, 100.0, 110.0, 110.0]),
        det(Category::Circle, 0.85, g[1]),
        det(Category::Circle, 0.80, g[0]),
        det(Category::Circle, 0.75, g[2]),
    ]];
    let r = evaluate_map(&dets, &gts, &[0.5]).unwrap();
    let expected = 34.0 / 45.0;
    assert!(
        (r.map - expected).abs() < 1e-6,
        "AP {} vs hand-computed {expected}",
        r.map
    );
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("map.csv");
    write_map_csv(&r, &p).unwrap();
    let csv = std::fs::read_to_string(&p).unwrap();
    assert!(csv.starts_with("class,ap50,ap75,map\n"));
    assert!(csv.contains("circle,0.755556"));
}

fn random_fixture(seed: u64) -> (Vec<DetectionSet>, Vec<Vec<GtBox>>) {
    let mut rng = crate::rng::stream(seed, "map-fixture", 0);
    let n_images = rng.gen_range(1..4);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n_images {
        let mut img_gts = Vec::new();
        for _ in 0..rng.gen_range(1..5) {
            let x = rng.gen_range(0.0f32..40.0);
            let y = rng.gen_range(0.0f32..40.0);
            let w = rng.gen_range(5.0f32..15.0);
            let h = rng.gen_range(5.0f32..15.0);
            let cat = Category::ALL[rng.gen_range(0..2)];
            img_gts.push(gt(cat, [x, y, x + w, y + h]));
        }
        let mut img_dets = Vec::new();
        for g in &img_gts {
            // Jittered copy of each GT plus random spurious boxes.
            if rng.gen_bool(0.8) {
                let dx = rng.gen_range(-3.0f32..3.0);
                let dy = rng.gen_range(-3.0f32..3.0);
                img_dets.push(det(
                    g.category,
                    rng.gen_range(0.05f32..0.95),
                    [g.bbox.x_min + dx, g.bbox.y_min + dy, g.bbox.x_max + dx, g.bbox.y_max + dy],
                ));
            }
        }
        for _ in 0..rng.gen_range(0..3) {
            let x = rng.gen_range(0.0f32..40.0);
            let y = rng.gen_range(0.0f32..40.0);
            img_dets.push(det(
                Category::ALL[rng.gen_range(0..2)],
                rng.gen_range(0.05f32..0.95),
                [x, y, x + rng.gen_range(5.0..15.0), y + rng.gen_range(5.0..15.0)],
            ));
        }
        dets.push(img_dets);
        gts.push(img_gts);
    }
    (dets, gts)
}

#[test]
fn map_is_invariant_under_monotone_confidence_transforms() {
    for seed in 0..50u64 {
        let (dets, gts) = random_fixture(seed);
        let base = evaluate_map(&dets, &gts, &COCO_THRESHOLDS).unwrap();
        // Strictly monotone on (0,1): preserves ranking exactly.
        let transformed: Vec<DetectionSet> = dets
            .iter()
            .map(|ds| {
                ds.iter()
                    .map(|d| Detection {
                        confidence: 0.05 + 0.9 * d.confidence * d.confidence,
                        ..d.clone()
                    })
                    .collect()
            })
            .collect();
        let t = evaluate_map(&transformed, &gts, &COCO_THRESHOLDS).unwrap();
        assert!(
            (base.map - t.map).abs() < 1e-9,
            "seed {seed}: mAP changed under monotone transform: {} vs {}",
            base.map,
            t.map
        );
    }
}

#[test]
fn trailing_false_positive_never_increases_ap() {
    for seed in 0..20u64 {
        let (mut dets, gts) = random_fixture(seed);
        let base = evaluate_map(&dets, &gts, &COCO_THRESHOLDS).unwrap();
        let min_conf = dets
            .iter()
            .flatten()
            .map(|d| d.confidence)
            .fold(f32::INFINITY, f32::min);
        dets[0].push(det(Category::Circle, (min_conf - 0.01).max(0.001), [200.0, 200.0, 210.0, 210.0]));
        let with_fp = evaluate_map(&dets, &gts, &COCO_THRESHOLDS).unwrap();
        assert!(
            with_fp.map <= base.map + 1e-9,
            "seed {seed}: FP increased mAP {} -> {}",
            base.map,
            with_fp.map
        );
    }
}

#[test]
fn map_excludes_classes_without_gt() {
    let gts = vec![vec![gt(Category::Circle, [0.0, 0.0, 10.0, 10.0])]];
    let dets = vec![vec![det(Category::Circle, 0.9, [0.0, 0.0, 10.0, 10.0])]];
    let r = evaluate_map(&dets, &gts, &[0.5]).unwrap();
    assert_eq!(r.per_class.len(), 1);
    assert!((r.map - 1.0).abs() < 1e-6);
    let _: &ClassMetrics = &r.per_class[0];
    // Mismatched lengths rejected.
    assert!(evaluate_map(&dets, &[], &[0.5]).is_err());
}

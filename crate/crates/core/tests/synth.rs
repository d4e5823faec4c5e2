use frozenseg::geometry::{box_iou, Box};
use frozenseg::synth::{
    gen_scene, mask_bound, read_dataset, write_dataset, DetectorConfig, FrozenDetector, SceneSpec,
};
use frozenseg::tensor::Tensor;
use frozenseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> DetectorConfig {
    DetectorConfig {
        d: 16,
        n_queries: 6,
        box_noise: 0.1,
        num_classes: 3,
        enc_layer_index: 4,
    }
}

#[test]
fn scenes_are_deterministic_and_valid() {
    let spec = SceneSpec::default();
    assert_eq!(gen_scene(5, &spec).unwrap(), gen_scene(5, &spec).unwrap());
    for seed in 0..100 {
        let s = gen_scene(seed, &spec).unwrap();
        assert!(!s.is_empty() && s.len() <= spec.max_instances);
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for k in 0..s.len() {
            let m = s.mask(k);
            assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(mask_bound(m, 128, 128), Some(s.boxes[k]), "seed {seed} instance {k}");
            assert!(s.labels[k] < 3);
        }
    }
}

#[test]
fn single_instance_spec() {
    let spec = SceneSpec {
        max_instances: 1,
        ..Default::default()
    };
    for seed in 0..10 {
        let s = gen_scene(seed, &spec).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(mask_bound(s.mask(0), 128, 128).unwrap(), s.boxes[0]);
    }
    assert!(matches!(
        gen_scene(0, &SceneSpec { h: 96, ..Default::default() }),
        Err(Error::InvalidSpec(_))
    ));
}

#[test]
fn detector_without_noise_reproduces_gt_boxes() {
    let spec = SceneSpec::default();
    let det = FrozenDetector::new(3, DetectorConfig { box_noise: 0.0, ..small_cfg() }).unwrap();
    for seed in 0..10 {
        let s = gen_scene(seed, &spec).unwrap();
        let out = det.run(&s).unwrap();
        for (i, src) in out.source_gt.iter().enumerate() {
            if let Some(g) = src {
                assert_eq!(out.boxes[i], s.boxes[*g]);
            }
        }
        assert_eq!(out.source_gt.iter().flatten().count(), s.len());
    }
}

#[test]
fn detector_is_deterministic_and_shaped() {
    let s = gen_scene(11, &SceneSpec::default()).unwrap();
    let det = FrozenDetector::new(3, small_cfg()).unwrap();
    let a = det.run(&s).unwrap();
    assert_eq!(a, det.run(&s).unwrap());
    assert_eq!(a, FrozenDetector::new(3, small_cfg()).unwrap().run(&s).unwrap());
    assert_eq!(a.backbone_c1.shape(), &[16, 32, 32]);
    for (l, e) in a.enc_levels.iter().enumerate() {
        let side = 128 >> (l + 3);
        assert_eq!(e.shape(), &[16, side, side]);
    }
    assert!(a.class_scores.data().iter().all(|&c| c > 0.0 && c < 1.0));
    assert!(a.backbone_c1.grad.is_none());
}

#[test]
fn layer_index_changes_only_stride8_onward() {
    let s = gen_scene(12, &SceneSpec::default()).unwrap();
    let a = FrozenDetector::new(3, small_cfg()).unwrap().run(&s).unwrap();
    let b = FrozenDetector::new(3, DetectorConfig { enc_layer_index: 2, ..small_cfg() })
        .unwrap()
        .run(&s)
        .unwrap();
    assert_eq!(a.backbone_c1, b.backbone_c1);
    assert_ne!(a.enc_levels[0], b.enc_levels[0]);
    assert_eq!(b.enc_layer_index, 2);
}

#[test]
fn positive_boxes_overlap_gt_and_scores_separate() {
    let spec = SceneSpec::default();
    let det = FrozenDetector::new(9, small_cfg()).unwrap();
    for seed in 0..100 {
        let s = gen_scene(seed, &spec).unwrap();
        let out = det.run(&s).unwrap();
        let mut min_pos = f64::INFINITY;
        let mut max_neg: f64 = 0.0;
        for i in 0..out.n_queries() {
            let (label, c) = out.top_class(i);
            match out.source_gt[i] {
                Some(g) => {
                    assert!(box_iou(&out.boxes[i], &s.boxes[g]) >= 0.5);
                    assert_eq!(label, s.labels[g]);
                    min_pos = min_pos.min(c);
                }
                None => max_neg = max_neg.max(c),
            }
        }
        assert!(min_pos > max_neg);
    }
}

#[test]
fn too_few_queries() {
    let spec = SceneSpec {
        max_instances: 3,
        ..Default::default()
    };
    let s = (0..50).map(|i| gen_scene(i, &spec).unwrap()).find(|s| s.len() == 3).unwrap();
    let det = FrozenDetector::new(0, DetectorConfig { n_queries: 2, ..small_cfg() }).unwrap();
    assert!(matches!(det.run(&s), Err(Error::TooFewQueries { queries: 2, instances: 3 })));
}

fn with_scores(out: &frozenseg::synth::DetectorOutput, top: &[f64]) -> frozenseg::synth::DetectorOutput {
    let mut o = out.clone();
    let nc = o.class_scores.shape()[1];
    let mut data = vec![0.001; top.len() * nc];
    for (i, &t) in top.iter().enumerate() {
        data[i * nc] = t;
    }
    o.class_scores = Tensor::new(vec![top.len(), nc], data).unwrap();
    o
}

#[test]
fn select_top_queries_examples() {
    let s = gen_scene(1, &SceneSpec { max_instances: 1, ..Default::default() }).unwrap();
    let det = FrozenDetector::new(0, DetectorConfig { n_queries: 3, ..small_cfg() }).unwrap();
    let base = det.run(&s).unwrap();
    let o = with_scores(&base, &[0.9, 0.1, 0.5]);
    let sel = o.select_top_queries(2).unwrap();
    assert_eq!(sel.boxes, vec![o.boxes[0], o.boxes[2]]);
    let all = o.select_top_queries(3).unwrap();
    assert_eq!(all.boxes.len(), 3);
    assert!(matches!(o.select_top_queries(0), Err(Error::InvalidN { .. })));
    assert!(matches!(o.select_top_queries(4), Err(Error::InvalidN { .. })));

    // random scores against a full sort
    let det = FrozenDetector::new(0, DetectorConfig { n_queries: 12, ..small_cfg() }).unwrap();
    let base = det.run(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let top: Vec<f64> = (0..12).map(|_| (rng.random_range(0..6) as f64) / 10.0 + 0.05).collect();
        let o = with_scores(&base, &top);
        let n = rng.random_range(1..=12);
        let sel = o.select_top_queries(n).unwrap();
        let mut idx: Vec<usize> = (0..12).collect();
        idx.sort_by(|&a, &b| top[b].partial_cmp(&top[a]).unwrap().then(a.cmp(&b)));
        let expect: Vec<Box> = idx[..n].iter().map(|&i| o.boxes[i]).collect();
        assert_eq!(sel.boxes, expect);
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::default();
    write_dataset(dir.path(), 7, 3, &spec).unwrap();
    let scenes = read_dataset(dir.path()).unwrap();
    assert_eq!(scenes.len(), 3);
    for (i, s) in scenes.iter().enumerate() {
        assert_eq!(s, &gen_scene(7 + i as u64, &spec).unwrap());
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
}

use frozenseg::geometry::paste_mask;
use frozenseg::model::{
    count_params, load_checkpoint, save_checkpoint, sine_position, EncoderKind, MaskHead, MaskHeadConfig, WindowPlan, LN_EPS,
};
use frozenseg::synth::{gen_scene, DetectorConfig, DetectorOutput, FrozenDetector, SceneSpec};
use frozenseg::tensor::kernels::{bilinear_read, gelu, resize_bilinear, sigmoid};
use frozenseg::tensor::{AttentionLayout, ParamGrads, Tape, Tensor};
use frozenseg::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> MaskHeadConfig {
    MaskHeadConfig {
        d: 16,
        d_mapper: 8,
        roi_h: 8,
        roi_w: 8,
        neck_groups: 4,
        deform_heads: 2,
        deform_points: 2,
        window_size: 4,
        window_heads: 2,
        query_heads: 2,
        scoring_channels: 4,
        scoring_hidden: 8,
        ffn_ratio: 2,
        img_depth: 1,
        box_depth: 1,
        ..MaskHeadConfig::default()
    }
}

fn detector_output(seed: u64) -> DetectorOutput {
    let spec = SceneSpec {
        h: 64,
        w: 64,
        ..Default::default()
    };
    let scene = gen_scene(seed, &spec).unwrap();
    let det = FrozenDetector::new(
        1,
        DetectorConfig {
            d: 16,
            n_queries: 5,
            ..Default::default()
        },
    )
    .unwrap();
    det.run(&scene).unwrap()
}

#[test]
fn count_params_examples() {
    let c = MaskHeadConfig {
        d: 256,
        img_enc: EncoderKind::Deformable,
        img_depth: 1,
        ..Default::default()
    };
    let n = count_params(&c);
    assert_eq!(n.img_enc, 756_864);
    assert_eq!(n.neck, 66_304);
    assert_eq!(n.mapper, 32_896);
    let w = count_params(&MaskHeadConfig {
        img_enc: EncoderKind::Window,
        img_depth: 1,
        ..c.clone()
    });
    assert_eq!(w.img_enc, 791_560);
    let cn = count_params(&MaskHeadConfig {
        img_enc: EncoderKind::ConvNext,
        img_depth: 1,
        ..c
    });
    assert_eq!(cn.img_enc, 538_880);
    assert_eq!(count_params(&MaskHeadConfig::baseline(256)).total(), 0);
}

fn arb_config() -> impl Strategy<Value = MaskHeadConfig> {
    let kinds = prop_oneof![
        Just(EncoderKind::None),
        Just(EncoderKind::Deformable),
        Just(EncoderKind::Window),
        Just(EncoderKind::ConvNext)
    ];
    (
        (kinds.clone(), 0usize..3, kinds, 0usize..3),
        (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()),
        (any::<bool>(), any::<bool>(), any::<bool>(), prop_oneof![Just(4usize), Just(8)]),
    )
        .prop_map(|((ie, id, be, bd), (mapper, neck, ffn, o2o), (b2o, score, full, roi))| MaskHeadConfig {
            img_enc: ie,
            img_depth: id,
            box_enc: be,
            box_depth: bd,
            mapper,
            d_mapper: if mapper { 8 } else { 16 },
            neck,
            query_ffn: ffn,
            query_o2o: o2o,
            query_b2o: b2o,
            mask_scoring: score,
            full_image_path: full,
            roi_h: roi,
            roi_w: 12 - roi,
            ..small_cfg()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_form_count_matches_built_model(cfg in arb_config()) {
        let head = MaskHead::new(cfg.clone(), 3).unwrap();
        prop_assert_eq!(head.num_params(), count_params(&cfg).total());
    }
}

/// Layer norm over the last axis with unit gain and zero shift.
fn ln_rows(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let m = r.iter().sum::<f64>() / d as f64;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
            r.iter().map(move |a| (a - m) / (v + LN_EPS).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

fn lin(head: &MaskHead, prefix: &str, x: &[f64], din: usize) -> Vec<f64> {
    let w = head.params.tensor(head.params.id_of(&format!("{prefix}.w")).unwrap());
    let b = head.params.tensor(head.params.id_of(&format!("{prefix}.b")).unwrap());
    let dout = w.shape()[1];
    x.chunks(din)
        .flat_map(|r| {
            (0..dout)
                .map(|j| b.data()[j] + (0..din).map(|i| r[i] * w.data()[i * dout + j]).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn zero_offsets_average_reference_points() {
    // With both predictors zeroed every point of every level samples the
    // token's reference position with equal weight.
    let cfg = MaskHeadConfig {
        img_depth: 1,
        ..small_cfg()
    };
    let mut head = MaskHead::new(cfg, 0).unwrap();
    head.zero_params(&["offsets.b"]);
    let det = detector_output(2);
    let mut t = Tape::new();
    let e1 = head.encode_image(&mut t, &det).unwrap();
    let got = t.value(e1).to_vec();

    let d = 16;
    let mut tokens = Vec::new();
    let mut sizes = Vec::new();
    for e in &det.enc_levels {
        let (h, w) = (e.shape()[1], e.shape()[2]);
        for p in 0..h * w {
            for c in 0..d {
                tokens.push(e.data()[c * h * w + p]);
            }
        }
        sizes.push((h, w));
    }
    let value = lin(&head, "img_enc.0.value", &tokens, d);
    let (h1, w1) = sizes[0];
    let mut expect = vec![0.0; d * h1 * w1];
    for i in 0..h1 {
        for j in 0..w1 {
            let tok = i * w1 + j;
            let (rx, ry) = ((j as f64 + 0.5) / w1 as f64, (i as f64 + 0.5) / h1 as f64);
            let mut sampled = vec![0.0; d];
            let mut start = 0;
            for &(h, w) in &sizes {
                for (c, s) in sampled.iter_mut().enumerate() {
                    let plane: Vec<f64> = (0..h * w).map(|p| value[(start + p) * d + c]).collect();
                    *s += bilinear_read(&plane, h, w, rx * w as f64, ry * h as f64) / sizes.len() as f64;
                }
                start += h * w;
            }
            let o = lin(&head, "img_enc.0.out", &sampled, d);
            let x: Vec<f64> = (0..d).map(|c| tokens[tok * d + c] + o[c]).collect();
            let x = ln_rows(&x, d);
            let h = lin(&head, "img_enc.0.ffn.fc1", &x, d).into_iter().map(gelu).collect::<Vec<_>>();
            let f = lin(&head, "img_enc.0.ffn.fc2", &h, h.len());
            let y: Vec<f64> = (0..d).map(|c| x[c] + f[c]).collect();
            let y = ln_rows(&y, d);
            for c in 0..d {
                expect[c * h1 * w1 + tok] = y[c];
            }
        }
    }
    let err = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "max error {err}");
}

#[test]
fn deformable_with_zero_residuals_reduces_to_layer_norm() {
    let mut head = MaskHead::new(small_cfg(), 0).unwrap();
    head.zero_params(&["out.w", "out.b", "fc2.w", "fc2.b"]);
    let det = detector_output(3);
    let mut t = Tape::new();
    let e1 = head.encode_image(&mut t, &det).unwrap();
    let e = &det.enc_levels[0];
    let (h, w) = (e.shape()[1], e.shape()[2]);
    let tokens: Vec<f64> = (0..h * w).flat_map(|p| (0..16).map(move |c| e.data()[c * h * w + p])).collect();
    let expect = ln_rows(&ln_rows(&tokens, 16), 16);
    for p in 0..h * w {
        for c in 0..16 {
            assert!((t.value(e1)[c * h * w + p] - expect[p * 16 + c]).abs() < 1e-9);
        }
    }
}

#[test]
fn pre_norm_encoders_are_identity_with_zero_residuals() {
    let det = detector_output(4);
    for kind in [EncoderKind::Window, EncoderKind::ConvNext] {
        let cfg = MaskHeadConfig {
            img_enc: kind,
            img_depth: 2,
            ..small_cfg()
        };
        let mut head = MaskHead::new(cfg, 5).unwrap();
        assert!(head.zero_params(&["proj.w", "proj.b", "fc2.w", "fc2.b"]) > 0);
        let mut t = Tape::new();
        let e1 = head.encode_image(&mut t, &det).unwrap();
        assert_eq!(t.value(e1), det.enc_levels[0].data(), "{kind}");
    }
}

#[test]
fn query_encoder_identity_and_single_query_attention() {
    let det = detector_output(5);
    let cfg = MaskHeadConfig {
        query_o2o: true,
        ..small_cfg()
    };
    let mut head = MaskHead::new(cfg, 1).unwrap();
    head.zero_params(&["b2o.v.w", "b2o.v.b", "ffn.fc2.w", "ffn.fc2.b"]);
    let one = det.subset(&[0]);
    let mut t = Tape::new();
    let sv = head.scene_forward(&mut t, &one).unwrap();
    let q_scene = t.value(sv.queries).to_vec();

    // O2O over a single query: softmax over one key is 1.
    let proj = lin(&head, "query.proj", one.queries.data(), 16);
    let v = lin(&head, "query.o2o.v", &ln_rows(&proj, 8), 8);
    let o = lin(&head, "query.o2o.out", &v, 8);
    for c in 0..8 {
        assert!((q_scene[c] - (proj[c] + o[c])).abs() < 1e-12);
    }

    // B2O with a zero value projection and FFN with zero output leave it alone.
    let qv = head.query_forward(&mut t, &sv, 0, &one.boxes[0], 64, 64).unwrap();
    let r = t.value(qv.roi.unwrap()).to_vec();
    let logits = t.value(qv.logits);
    for (p, &z) in logits.iter().enumerate() {
        let dot: f64 = (0..8).map(|c| r[p * 8 + c] * q_scene[c]).sum();
        assert!((z - dot).abs() < 1e-12);
    }
}

#[test]
fn window_attention_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, d, heads, ws) = (9, 4, 2, 3);
    let plan = WindowPlan::new(3, 3, ws, false);
    let table = Tensor::uniform(vec![25, heads], -1.0, 1.0, &mut rng);
    let qkv: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(vec![n, d], -1.0, 1.0, &mut rng)).collect();
    let run = |perm: &[usize]| {
        let mut t = Tape::new();
        let vars: Vec<_> = qkv
            .iter()
            .map(|x| {
                let v = t.constant(x);
                t.gather_rows(v, perm.iter().map(|&i| Some(i)).collect()).unwrap()
            })
            .collect();
        // the relative index follows the tokens' original positions
        let mut bias_index = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                bias_index[i * n + j] = plan.bias_index[perm[i] * n + perm[j]];
            }
        }
        let tb = t.constant(&table);
        let layout = AttentionLayout {
            heads,
            blocks: 1,
            q_len: n,
            k_len: n,
            allowed: None,
            bias_index: Some(bias_index),
        };
        let out = t.attention(vars[0], vars[1], vars[2], Some(tb), layout).unwrap();
        t.value(out).to_vec()
    };
    let id: Vec<usize> = (0..n).collect();
    let base = run(&id);
    for _ in 0..20 {
        let mut perm = id.clone();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let out = run(&perm);
        for i in 0..n {
            for c in 0..d {
                assert!((out[i * d + c] - base[perm[i] * d + c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn baseline_full_image_logits_are_query_feature_products() {
    let cfg = MaskHeadConfig {
        full_image_path: true,
        ..MaskHeadConfig::baseline(16)
    };
    let head = MaskHead::new(cfg, 0).unwrap();
    assert_eq!(head.num_params(), 0);
    let det = detector_output(6);
    let mut t = Tape::new();
    let sv = head.scene_forward(&mut t, &det).unwrap();
    let qv = head.query_forward(&mut t, &sv, 2, &det.boxes[2], 64, 64).unwrap();
    let c1 = det.backbone_c1.data();
    let e = &det.enc_levels[0];
    let up = resize_bilinear(e.data(), 16, e.shape()[1], e.shape()[2], 16, 16);
    let q = &det.queries.data()[2 * 16..3 * 16];
    for p in 0..256 {
        let expect: f64 = (0..16).map(|c| q[c] * (c1[c * 256 + p] + up[c * 256 + p])).sum();
        assert!((t.value(qv.logits)[p] - expect).abs() < 1e-10);
    }
    let preds = head.segment(&det).unwrap();
    assert_eq!(preds.len(), 5);
    assert!(preds.iter().all(|p| p.iou_pred.is_none()));
}

/// Weighted sum of two queries' mask logits plus, when `score_w` is
/// non-zero, their predicted IoUs.
fn param_loss(head: &MaskHead, det: &DetectorOutput, w: &[Vec<f64>], score_w: f64) -> (f64, ParamGrads) {
    let mut t = Tape::new();
    let sv = head.scene_forward(&mut t, det).unwrap();
    let mut terms = Vec::new();
    for (i, wi) in w.iter().enumerate() {
        let qv = head.query_forward(&mut t, &sv, i, &det.boxes[i], 64, 64).unwrap();
        let wv = t.constant_from(vec![wi.len(), 1], wi.clone()).unwrap();
        let prod = t.mul(qv.logits, wv).unwrap();
        terms.push(t.sum(prod));
        if score_w != 0.0 {
            let sc = head.score_forward(&mut t, &qv).unwrap().unwrap();
            let sc = t.reshape(sc, vec![]).unwrap();
            terms.push(t.scale(sc, score_w));
        }
    }
    let mut total = terms[0];
    for &x in &terms[1..] {
        total = t.add(total, x).unwrap();
    }
    let v = t.scalar(total);
    t.backward(total).unwrap();
    (v, t.param_grads())
}

/// Central differences on two random coordinates of every parameter whose
/// name passes `select`.
fn check_param_grads(head: &mut MaskHead, det: &DetectorOutput, w: &[Vec<f64>], score_w: f64, select: impl Fn(&str) -> bool, rng: &mut ChaCha8Rng) {
    let (_, grads) = param_loss(head, det, w, score_w);
    let eps = 1e-5;
    let names: Vec<String> = head.params.iter().map(|(_, p)| p.name.clone()).filter(|n| select(n)).collect();
    assert!(!names.is_empty());
    for name in &names {
        let id = head.params.id_of(name).unwrap();
        let n = head.params.tensor(id).numel();
        let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for _ in 0..2 {
            let k = rng.random_range(0..n);
            let orig = head.params.tensor(id).data()[k];
            head.params.get_mut(id).tensor.data_mut()[k] = orig + eps;
            let lp = param_loss(head, det, w, score_w).0;
            head.params.get_mut(id).tensor.data_mut()[k] = orig - eps;
            let lm = param_loss(head, det, w, score_w).0;
            head.params.get_mut(id).tensor.data_mut()[k] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let rel = (num - analytic[k]).abs() / num.abs().max(analytic[k].abs()).max(1e-3);
            assert!(rel < 1e-5, "{name}[{k}]: analytic {} numeric {num}", analytic[k]);
        }
    }
}

#[test]
fn head_parameter_gradients_match_finite_differences() {
    let det = detector_output(7).subset(&[0, 1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for cfg in [
        MaskHeadConfig {
            query_o2o: true,
            ..small_cfg()
        },
        MaskHeadConfig {
            img_enc: EncoderKind::Window,
            box_enc: EncoderKind::ConvNext,
            img_depth: 2,
            ..small_cfg()
        },
        MaskHeadConfig {
            box_enc: EncoderKind::Window,
            img_enc: EncoderKind::ConvNext,
            box_depth: 2,
            ..small_cfg()
        },
    ] {
        let mut head = MaskHead::new(cfg, 2).unwrap();
        // Move every parameter off its initial value: zero-initialised
        // branches then carry gradient, and deformable sample positions
        // leave the pixel-centre kinks of bilinear interpolation.
        let names: Vec<String> = head.params.iter().map(|(_, p)| p.name.clone()).collect();
        for name in &names {
            let id = head.params.id_of(name).unwrap();
            for v in head.params.get_mut(id).tensor.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let w: Vec<Vec<f64>> = (0..2).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        check_param_grads(&mut head, &det, &w, 0.0, |n| !n.starts_with("scoring."), &mut rng);
        // The scoring head reads detached inputs, so only its own
        // parameters see the score term.
        check_param_grads(&mut head, &det, &w, 3.0, |n| n.starts_with("scoring."), &mut rng);
    }
}

#[test]
fn scoring_head_does_not_touch_mask_parameters() {
    let head = MaskHead::new(small_cfg(), 4).unwrap();
    let det = detector_output(8);
    let mut t = Tape::new();
    let sv = head.scene_forward(&mut t, &det).unwrap();
    let qv = head.query_forward(&mut t, &sv, 0, &det.boxes[0], 64, 64).unwrap();
    let sc = head.score_forward(&mut t, &qv).unwrap().unwrap();
    let sc = t.reshape(sc, vec![]).unwrap();
    t.backward(sc).unwrap();
    let grads = t.param_grads();
    assert!(!grads.is_empty());
    for (id, _) in grads.iter() {
        assert!(head.params.get(id).name.starts_with("scoring."));
    }
}

#[test]
fn segment_outputs_are_pasted_probabilities() {
    let head = MaskHead::new(small_cfg(), 6).unwrap();
    let det = detector_output(9);
    let preds = head.segment(&det).unwrap();
    assert_eq!(preds, head.segment(&det).unwrap());
    let top = det.select_top_queries(5).unwrap();
    for p in &preds {
        assert_eq!(p.mask.shape(), &[64, 64]);
        assert!(p.mask.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let iou = p.iou_pred.unwrap();
        assert!(iou > 0.0 && iou < 1.0);
        assert!((p.score - p.class_score * iou).abs() < 1e-15);
        assert_eq!(p.bbox, top.boxes[p.query]);
    }
    // mask of query 1 re-derived by hand
    let mut t = Tape::new();
    let sv = head.scene_forward(&mut t, &top).unwrap();
    let qv = head.query_forward(&mut t, &sv, 1, &top.boxes[1], 64, 64).unwrap();
    let probs: Vec<f64> = t.value(qv.logits).iter().map(|&z| sigmoid(z)).collect();
    let pasted = paste_mask(&probs, 8, 8, &top.boxes[1], 64, 64).unwrap();
    let p1 = preds.iter().find(|p| p.query == 1).unwrap();
    assert!(pasted.max_abs_diff(&p1.mask) < 1e-12);
    assert!(preds.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn checkpoint_round_trip_and_shape_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.ckpt");
    let head = MaskHead::new(small_cfg(), 12).unwrap();
    save_checkpoint(&path, &head).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.cfg, head.cfg);
    assert_eq!(back.params.checksum(), head.params.checksum());
    let det = detector_output(10);
    assert_eq!(back.segment(&det).unwrap(), head.segment(&det).unwrap());

    // a header claiming a different mapper width no longer fits the payload
    let bytes = std::fs::read(&path).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    assert!(text.contains("config d_mapper = 8\n"));
    let pos = bytes.windows(20).position(|w| w == b"config d_mapper = 8\n").unwrap();
    let mut bad = bytes[..pos].to_vec();
    bad.extend_from_slice(b"config d_mapper = 4\n");
    bad.extend_from_slice(&bytes[pos + 20..]);
    let bad_path = dir.path().join("bad.ckpt");
    std::fs::write(&bad_path, bad).unwrap();
    assert!(matches!(load_checkpoint(&bad_path), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn mismatched_detector_width_is_rejected() {
    let head = MaskHead::new(MaskHeadConfig { d: 32, neck_groups: 4, ..small_cfg() }, 0).unwrap();
    assert!(matches!(head.segment(&detector_output(1)), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn sine_position_is_bounded_and_distinct() {
    let p = sine_position(8, 8, 16);
    assert!(p.iter().all(|v| v.abs() <= 1.0));
    let rows: Vec<&[f64]> = p.chunks(16).collect();
    for i in 0..rows.len() {
        for j in 0..i {
            assert!(rows[i].iter().zip(rows[j]).any(|(a, b)| (a - b).abs() > 1e-6));
        }
    }
}

#[test]
fn confidence_score_example_and_empty_mask() {
    // mean of the probabilities above one half is 0.8
    assert!((frozenseg::model::confidence_score(0.8, &[0.9, 0.7, 0.3]) - 0.64).abs() < 1e-15);
    assert_eq!(frozenseg::model::confidence_score(0.8, &[0.5, 0.2, 0.0]), 0.0);
    assert_eq!(frozenseg::model::confidence_score(0.8, &[]), 0.0);
}

proptest! {
    #[test]
    fn scores_never_exceed_class_confidence(
        c in 0.0f64..=1.0,
        iou in 0.0f64..=1.0,
        probs in prop::collection::vec(0.0f64..=1.0, 0..50),
        compose in any::<bool>(),
    ) {
        let s2 = frozenseg::model::confidence_score(c, &probs);
        prop_assert!((0.0..=c).contains(&s2));
        let head = MaskHead::new(MaskHeadConfig { score_compose: compose, ..small_cfg() }, 0).unwrap();
        for s in [head.instance_score(c, Some(iou), &probs), head.instance_score(c, None, &probs)] {
            prop_assert!((0.0..=c).contains(&s));
        }
    }
}

/// Same config on both paths with the RoI grid covering the whole stride-4
/// map; returns the largest logit and full-resolution mask differences.
fn path_gap(cfg: MaskHeadConfig, seed: u64, h: usize, w: usize) -> (f64, f64) {
    let spec = SceneSpec { h, w, ..Default::default() };
    let scene = gen_scene(seed, &spec).unwrap();
    let det = FrozenDetector::new(seed, DetectorConfig { d: cfg.d, n_queries: 4, ..Default::default() })
        .unwrap()
        .run(&scene)
        .unwrap();
    let roi_cfg = MaskHeadConfig {
        roi_h: h / 4,
        roi_w: w / 4,
        box_enc: EncoderKind::None,
        box_depth: 0,
        query_b2o: false,
        full_image_path: false,
        ..cfg
    };
    let full_cfg = MaskHeadConfig { full_image_path: true, ..roi_cfg.clone() };
    let roi = MaskHead::new(roi_cfg, seed).unwrap();
    let mut full = MaskHead::new(full_cfg, seed + 1).unwrap();
    for (_, p) in full.params.clone().iter() {
        let id = roi.params.id_of(&p.name).unwrap();
        full.set_param(&p.name, roi.params.tensor(id).clone()).unwrap();
    }
    let whole = frozenseg::geometry::Box::new(0.0, 0.0, w as f64, h as f64);
    let (mut dl, mut dm) = (0.0f64, 0.0f64);
    let mut t = Tape::new();
    let sa = roi.scene_forward(&mut t, &det).unwrap();
    let sb = full.scene_forward(&mut t, &det).unwrap();
    for i in 0..det.n_queries() {
        let a = roi.query_forward(&mut t, &sa, i, &whole, h, w).unwrap();
        let b = full.query_forward(&mut t, &sb, i, &whole, h, w).unwrap();
        let (la, lb) = (t.value(a.logits).to_vec(), t.value(b.logits).to_vec());
        dl = la.iter().zip(&lb).fold(dl, |m, (x, y)| m.max((x - y).abs()));
        let pa: Vec<f64> = la.iter().map(|&z| sigmoid(z)).collect();
        let pb: Vec<f64> = lb.iter().map(|&z| sigmoid(z)).collect();
        let ma = roi.full_res_mask(&a, &pa, h, w).unwrap();
        let mb = full.full_res_mask(&b, &pb, h, w).unwrap();
        dm = dm.max(ma.max_abs_diff(&mb));
    }
    (dl, dm)
}

#[test]
fn whole_image_box_matches_full_image_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let kinds = [EncoderKind::None, EncoderKind::Deformable, EncoderKind::Window, EncoderKind::ConvNext];
    for seed in 0..6 {
        let cfg = MaskHeadConfig {
            img_enc: kinds[seed as usize % 4],
            mapper: rng.random(),
            neck: rng.random(),
            query_o2o: rng.random(),
            query_ffn: rng.random(),
            ..small_cfg()
        };
        let (h, w) = (64 * rng.random_range(1..3), 64 * rng.random_range(1..3));
        let (dl, dm) = path_gap(cfg, seed, h, w);
        assert!(dl <= 1e-9 && dm <= 1e-9, "seed {seed}: {dl} {dm}");
    }
}

#[test]
fn zero_query_gives_half_inside_the_footprint() {
    let mut det = detector_output(3);
    det.queries = Tensor::zeros(det.queries.shape().to_vec());
    let head = MaskHead::new(MaskHeadConfig { roi_h: 8, roi_w: 8, ..MaskHeadConfig::baseline(16) }, 0).unwrap();
    let top = det.select_top_queries(5).unwrap();
    for p in head.segment(&det).unwrap() {
        let b = top.boxes[p.query];
        let (x0, y0, x1, y1) = b.footprint(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let v = p.mask.data()[y * 64 + x];
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                let want = if inside { 0.5 } else { 0.0 };
                assert!((v - want).abs() < 1e-15, "({x}, {y}): {v}");
            }
        }
    }
}

#[test]
fn constant_input_to_the_neck_normalises_to_its_shift() {
    // with one channel per group, group norm of a spatially constant map
    // is zero and leaves only the shift
    let mut det = detector_output(5);
    det.backbone_c1 = Tensor::full(det.backbone_c1.shape().to_vec(), 0.3);
    let cfg = MaskHeadConfig {
        img_enc: EncoderKind::None,
        img_depth: 0,
        mapper: false,
        neck_groups: 16,
        ..small_cfg()
    };
    let mut head = MaskHead::new(cfg, 0).unwrap();
    let e1 = &det.enc_levels[0];
    head.set_param("neck.gn.b", Tensor::zeros(vec![16])).unwrap();
    let mut t = Tape::new();
    let sv = head.scene_forward(&mut t, &det).unwrap();
    let (h4, w4) = (sv.h4, sv.w4);
    let fused = t.value(sv.fmap).to_vec();
    let up = resize_bilinear(e1.data(), 16, e1.shape()[1], e1.shape()[2], h4, w4);
    let gap = fused.iter().zip(&up).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(gap < 1e-9, "{gap}");
}

#[test]
fn predictions_hold_their_invariants_across_scenes() {
    let head = MaskHead::new(small_cfg(), 9).unwrap();
    let spec = SceneSpec { h: 64, w: 64, ..Default::default() };
    let detector = FrozenDetector::new(2, DetectorConfig { d: 16, n_queries: 5, ..Default::default() }).unwrap();
    for seed in 0..50 {
        let det = detector.run(&gen_scene(1000 + seed, &spec).unwrap()).unwrap();
        let preds = head.segment(&det).unwrap();
        assert_eq!(preds.len(), 5);
        let mut qs: Vec<usize> = preds.iter().map(|p| p.query).collect();
        qs.sort_unstable();
        assert_eq!(qs, vec![0, 1, 2, 3, 4]);
        for p in &preds {
            assert!(p.mask.is_finite());
            assert!(p.mask.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((0.0..=p.class_score).contains(&p.score));
            let (x0, y0, x1, y1) = p.bbox.footprint(64, 64);
            for (k, &v) in p.mask.data().iter().enumerate() {
                let (x, y) = (k % 64, k / 64);
                if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert!(preds.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

use frozenseg::tensor::gradcheck::{grad_check, op_suite};
use frozenseg::tensor::{AttentionLayout, DeformLevel, Tape, Tensor};
use frozenseg::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

// Naive 4-neighbour bilinear read, half-pixel centres, zero outside.
fn oracle_bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let u = x - 0.5;
    let v = y - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let mut s = 0.0;
    for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let xi = x0 + dx;
        let yi = y0 + dy;
        let wx = 1.0 - (u - xi).abs();
        let wy = 1.0 - (v - yi).abs();
        if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
            s += wx * wy * plane[yi as usize * w + xi as usize];
        }
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn oracle_conv(x: &[f64], k: &[f64], cin: usize, h: usize, w: usize, cout: usize, kh: usize, kw: usize, stride: usize, pad: usize, depthwise: bool) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cper = if depthwise { 1 } else { cin };
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ci in 0..cper {
                    let src = if depthwise { co } else { ci };
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x[src * h * w + iy as usize * w + ix as usize] * k[((co * cper + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    out
}

#[test]
fn affine_examples() {
    let mut tp = Tape::new();
    let x = tp.constant(&t(&[1, 2], &[1.0, 2.0]));
    let w = tp.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tp.constant(&t(&[2], &[0.0, 0.0]));
    let y = tp.affine(x, w, b).unwrap();
    assert_eq!(tp.value(y), &[1.0, 2.0]);

    let x = tp.constant(&t(&[1, 2], &[1.0, 1.0]));
    let w = tp.constant(&t(&[2, 1], &[2.0, 3.0]));
    let b = tp.constant(&t(&[1], &[1.0]));
    let y = tp.affine(x, w, b).unwrap();
    assert_eq!(tp.value(y), &[6.0]);

    let bad = tp.constant(&t(&[3, 1], &[0.0; 3]));
    assert!(matches!(tp.affine(x, bad, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn affine_gradient_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ins = [
        Tensor::randn(vec![3, 5], 1.0, &mut rng),
        Tensor::randn(vec![5, 4], 1.0, &mut rng),
        Tensor::randn(vec![4], 1.0, &mut rng),
    ];
    let w = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let rep = grad_check(
        |tp, v| {
            let y = tp.affine(v[0], v[1], v[2])?;
            frozenseg::tensor::gradcheck::weighted_sum(tp, y, &w)
        },
        &ins,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn layer_norm_examples() {
    let mut tp = Tape::new();
    let g = tp.constant(&Tensor::full(vec![3], 1.0));
    let b = tp.constant(&Tensor::zeros(vec![3]));
    let x = tp.constant(&t(&[3], &[3.0, 3.0, 3.0]));
    let y = tp.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tp.value(y), &[0.0, 0.0, 0.0]);

    let g = tp.constant(&Tensor::full(vec![2], 1.0));
    let b = tp.constant(&Tensor::zeros(vec![2]));
    let x = tp.constant(&t(&[2], &[1.0, 3.0]));
    let y = tp.layer_norm(x, g, b, 1e-12).unwrap();
    close(tp.value(y), &[-1.0, 1.0], 1e-9);
}

#[test]
fn layer_norm_gradient_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ins = [
        Tensor::randn(vec![4, 8], 1.0, &mut rng),
        Tensor::randn(vec![8], 1.0, &mut rng),
        Tensor::randn(vec![8], 1.0, &mut rng),
    ];
    let w = Tensor::randn(vec![4, 8], 1.0, &mut rng);
    let rep = grad_check(
        |tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-5)?;
            frozenseg::tensor::gradcheck::weighted_sum(tp, y, &w)
        },
        &ins,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn group_norm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tp = Tape::new();
    let g = tp.constant(&Tensor::full(vec![4], 1.0));
    let b = tp.constant(&Tensor::zeros(vec![4]));
    let x = tp.constant(&Tensor::full(vec![4, 2, 3], 2.5));
    let y = tp.group_norm(x, 2, g, b, 1e-5).unwrap();
    assert!(tp.value(y).iter().all(|&v| v == 0.0));

    let xt = Tensor::randn(vec![4, 2, 3], 1.0, &mut rng);
    let x = tp.constant(&xt);
    let eps = 1e-5;

    // groups == C: per-channel normalisation by the direct formula
    let y = tp.group_norm(x, 4, g, b, eps).unwrap();
    let mut expect = Vec::new();
    for c in 0..4 {
        let ch = &xt.data()[c * 6..(c + 1) * 6];
        let m = ch.iter().sum::<f64>() / 6.0;
        let var = ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 6.0;
        expect.extend(ch.iter().map(|v| (v - m) / (var + eps).sqrt()));
    }
    close(tp.value(y), &expect, 1e-12);

    // groups == 1: whole-tensor normalisation
    let y = tp.group_norm(x, 1, g, b, eps).unwrap();
    let m = xt.data().iter().sum::<f64>() / 24.0;
    let var = xt.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / 24.0;
    let expect: Vec<f64> = xt.data().iter().map(|v| (v - m) / (var + eps).sqrt()).collect();
    close(tp.value(y), &expect, 1e-12);

    assert!(matches!(
        tp.group_norm(x, 3, g, b, eps),
        Err(Error::InvalidGroups { channels: 4, groups: 3 })
    ));
}

#[test]
fn activation_examples() {
    let mut tp = Tape::new();
    let z = tp.constant(&t(&[1], &[0.0]));
    let s = tp.sigmoid(z);
    assert_eq!(tp.value(s), &[0.5]);
    let z = tp.constant(&t(&[3], &[0.0, 0.0, 0.0]));
    let s = tp.softmax(z, 0).unwrap();
    close(tp.value(s), &[1.0 / 3.0; 3], 1e-15);
    assert!(matches!(tp.softmax(z, 1), Err(Error::InvalidAxis { axis: 1, rank: 1 })));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(vec![16], 1.0, &mut rng);
    let w = Tensor::randn(vec![16], 1.0, &mut rng);
    let rep = grad_check(
        |tp, v| {
            let y = tp.gelu(v[0]);
            frozenseg::tensor::gradcheck::weighted_sum(tp, y, &w)
        },
        &[x],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn conv2d_examples() {
    let mut tp = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = Tensor::randn(vec![1, 4, 5], 1.0, &mut rng);
    let x = tp.constant(&xt);
    let k = tp.constant(&Tensor::full(vec![1, 1, 1, 1], 1.0));
    let y = tp.conv2d(x, k, None, 1, 0, false).unwrap();
    assert_eq!(tp.value(y), xt.data());

    let x = tp.constant(&Tensor::full(vec![2, 3, 3], 1.0));
    let k = tp.constant(&Tensor::full(vec![2, 1, 3, 3], 1.0));
    let y = tp.conv2d(x, k, None, 1, 1, true).unwrap();
    assert_eq!(tp.shape(y), &[2, 3, 3]);
    assert_eq!(tp.value(y)[4], 9.0);
    assert_eq!(tp.value(y)[9 + 4], 9.0);
    assert_eq!(tp.value(y)[0], 4.0);

    assert!(matches!(tp.conv2d(x, k, None, 0, 1, true), Err(Error::InvalidStride)));
    let k3 = tp.constant(&Tensor::full(vec![3, 1, 3, 3], 1.0));
    assert!(matches!(tp.conv2d(x, k3, None, 1, 1, true), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let depthwise = rng.random_bool(0.3);
        let cin = rng.random_range(1..4);
        let cout = if depthwise { cin } else { rng.random_range(1..4) };
        let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
        let (kh, kw) = (rng.random_range(1..4), rng.random_range(1..4));
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..3);
        let cper = if depthwise { 1 } else { cin };
        let xt = Tensor::randn(vec![cin, h, w], 1.0, &mut rng);
        let kt = Tensor::randn(vec![cout, cper, kh, kw], 1.0, &mut rng);
        let mut tp = Tape::new();
        let x = tp.constant(&xt);
        let k = tp.constant(&kt);
        let y = tp.conv2d(x, k, None, stride, pad, depthwise).unwrap();
        let expect = oracle_conv(xt.data(), kt.data(), cin, h, w, cout, kh, kw, stride, pad, depthwise);
        close(tp.value(y), &expect, 1e-12);
    }
}

#[test]
fn bilinear_examples_and_oracle() {
    let mut tp = Tape::new();
    let f = tp.constant(&Tensor::full(vec![1, 4, 4], 2.5));
    let p = tp.constant(&t(&[2, 2], &[1.3, 2.9, 0.5, 3.5]));
    let y = tp.bilinear_sample(f, p).unwrap();
    close(tp.value(y), &[2.5, 2.5], 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ft = Tensor::randn(vec![3, 8, 8], 1.0, &mut rng);
    let f = tp.constant(&ft);
    let p = tp.constant(&t(&[1, 2], &[3.5, 6.5]));
    let y = tp.bilinear_sample(f, p).unwrap();
    close(tp.value(y), &[ft.at(&[0, 6, 3]), ft.at(&[1, 6, 3]), ft.at(&[2, 6, 3])], 0.0);

    let pts = Tensor::uniform(vec![1000, 2], -1.0, 9.0, &mut rng);
    let p = tp.constant(&pts);
    let y = tp.bilinear_sample(f, p).unwrap();
    for i in 0..1000 {
        for c in 0..3 {
            let e = oracle_bilinear(&ft.data()[c * 64..(c + 1) * 64], 8, 8, pts.data()[2 * i], pts.data()[2 * i + 1]);
            assert!((tp.value(y)[i * 3 + c] - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn interpolate_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xt = Tensor::randn(vec![2, 3, 5], 1.0, &mut rng);
    let mut tp = Tape::new();
    let x = tp.constant(&xt);
    let y = tp.interpolate(x, 3, 5).unwrap();
    close(tp.value(y), xt.data(), 1e-15);

    let c = tp.constant(&Tensor::full(vec![1, 3, 2], -1.25));
    for (oh, ow) in [(1, 1), (7, 4), (6, 9)] {
        let y = tp.interpolate(c, oh, ow).unwrap();
        close(tp.value(y), &vec![-1.25; oh * ow], 1e-15);
    }
    assert!(matches!(tp.interpolate(c, 0, 2), Err(Error::InvalidSize(0, 2))));

    // 2x2 ramp to 4x4: per-point bilinear read at mapped (clamped) centres
    let ramp = t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
    let r = tp.constant(&ramp);
    let y = tp.interpolate(r, 4, 4).unwrap();
    let mut expect = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            let sy = ((i as f64 + 0.5) * 0.5).clamp(0.5, 1.5);
            let sx = ((j as f64 + 0.5) * 0.5).clamp(0.5, 1.5);
            expect.push(oracle_bilinear(ramp.data(), 2, 2, sx, sy));
        }
    }
    close(tp.value(y), &expect, 0.0);
    close(&expect[..4], &[0.0, 0.25, 0.75, 1.0], 1e-15);
}

#[test]
fn backward_examples() {
    let mut tp = Tape::new();
    let w = tp.input(&t(&[3], &[0.1, 0.2, 0.3]));
    let l = tp.sum(w);
    tp.backward(l).unwrap();
    assert_eq!(tp.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    assert!(matches!(tp.backward(l), Err(Error::TapeConsumed)));

    tp.reset();
    let w = tp.input(&t(&[2], &[1.0, 2.0]));
    let sq = tp.mul(w, w).unwrap();
    let l = tp.sum(sq);
    tp.backward(l).unwrap();
    assert_eq!(tp.grad(w).unwrap(), &[2.0, 4.0]);

    tp.reset();
    let w = tp.input(&t(&[2], &[1.0, 2.0]));
    assert!(matches!(tp.backward(w), Err(Error::NonScalarLoss(_))));

    // branches accumulate
    tp.reset();
    let w = tp.input(&t(&[2], &[1.0, 2.0]));
    let a = tp.scale(w, 3.0);
    let b = tp.add(a, w).unwrap();
    let l = tp.sum(b);
    tp.backward(l).unwrap();
    assert_eq!(tp.grad(w).unwrap(), &[4.0, 4.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut tp = Tape::new();
    let c = tp.constant(&t(&[2], &[1.0, 2.0]));
    let w = tp.input(&t(&[2], &[3.0, 4.0]));
    let p = tp.mul(c, w).unwrap();
    let d = tp.detach(p);
    let q = tp.mul(d, w).unwrap();
    let l = tp.sum(q);
    tp.backward(l).unwrap();
    assert!(tp.grad(c).is_none());
    assert_eq!(tp.grad(w).unwrap(), &[3.0, 8.0]);
}

// Dense attention against a per-element loop.
#[test]
fn attention_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (heads, d, ql, kl, blocks) = (2, 6, 3, 5, 2);
    let q = Tensor::randn(vec![blocks * ql, d], 1.0, &mut rng);
    let k = Tensor::randn(vec![blocks * kl, d], 1.0, &mut rng);
    let v = Tensor::randn(vec![blocks * kl, d], 1.0, &mut rng);
    let table = Tensor::randn(vec![4, heads], 1.0, &mut rng);
    let index: Vec<usize> = (0..ql * kl).map(|i| (i * 7) % 4).collect();
    let allowed: Vec<bool> = (0..blocks * ql * kl).map(|i| i % 4 != 2).collect();
    let layout = AttentionLayout {
        heads,
        blocks,
        q_len: ql,
        k_len: kl,
        allowed: Some(allowed.clone()),
        bias_index: Some(index.clone()),
    };
    let mut tp = Tape::new();
    let (qv, kv, vv, tv) = (tp.constant(&q), tp.constant(&k), tp.constant(&v), tp.constant(&table));
    let y = tp.attention(qv, kv, vv, Some(tv), layout).unwrap();
    let dh = d / heads;
    for b in 0..blocks {
        for h in 0..heads {
            for i in 0..ql {
                let mut s = vec![f64::NEG_INFINITY; kl];
                for j in 0..kl {
                    if !allowed[(b * ql + i) * kl + j] {
                        continue;
                    }
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q.at(&[b * ql + i, h * dh + c]) * k.at(&[b * kl + j, h * dh + c]);
                    }
                    s[j] = dot / (dh as f64).sqrt() + table.at(&[index[i * kl + j], h]);
                }
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let o: f64 = (0..kl).map(|j| e[j] / z * v.at(&[b * kl + j, h * dh + c])).sum();
                    let got = tp.value(y)[(b * ql + i) * d + h * dh + c];
                    assert!((got - o).abs() < 1e-12, "{got} vs {o}");
                }
            }
        }
    }
}

#[test]
fn deform_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (heads, points, d) = (2, 3, 4);
    let levels = vec![DeformLevel { h: 3, w: 4, start: 0 }, DeformLevel { h: 2, w: 1, start: 12 }];
    let nq = 4;
    let value = Tensor::randn(vec![14, d], 1.0, &mut rng);
    let off = Tensor::uniform(vec![nq, heads * 2 * points * 2], -2.0, 2.0, &mut rng);
    let wts = Tensor::uniform(vec![nq, heads * 2 * points], 0.0, 1.0, &mut rng);
    let refs: Vec<f64> = (0..nq * 2).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut tp = Tape::new();
    let (vv, ov, wv) = (tp.constant(&value), tp.constant(&off), tp.constant(&wts));
    let y = tp.ms_deform_attn(vv, ov, wv, refs.clone(), levels.clone(), heads, points).unwrap();
    let dh = d / heads;
    for q in 0..nq {
        for h in 0..heads {
            for c in 0..dh {
                let mut acc = 0.0;
                for (l, lv) in levels.iter().enumerate() {
                    let plane: Vec<f64> = (0..lv.h * lv.w).map(|i| value.at(&[lv.start + i, h * dh + c])).collect();
                    for p in 0..points {
                        let s = (h * 2 + l) * points + p;
                        let x = refs[2 * q] * lv.w as f64 + off.at(&[q, 2 * s]);
                        let yv = refs[2 * q + 1] * lv.h as f64 + off.at(&[q, 2 * s + 1]);
                        acc += wts.at(&[q, s]) * oracle_bilinear(&plane, lv.h, lv.w, x, yv);
                    }
                }
                assert!((tp.value(y)[q * d + h * dh + c] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn bce_matches_formula() {
    let mut tp = Tape::new();
    let x = tp.constant(&t(&[3], &[0.0, 2.0, -30.0]));
    let l = tp.bce_with_logits(x, vec![1.0, 0.0, 0.0]).unwrap();
    let s = |z: f64| 1.0 / (1.0 + (-z).exp());
    let expect = (-(0.5f64).ln() - (1.0 - s(2.0)).ln() - (1.0 - s(-30.0)).ln()) / 3.0;
    assert!((tp.scalar(l) - expect).abs() < 1e-12);
}

#[test]
fn every_op_passes_gradient_checks_over_ten_seeds() {
    for seed in 100..110 {
        for (name, rep) in op_suite(seed, 1e-5, 1e-4).unwrap() {
            assert!(rep.pass, "seed {seed} {name}: {rep:?}");
        }
    }
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(vec![2, 6, 6], 1.0, &mut rng);
        let k = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
        let mut tp = Tape::new();
        let xv = tp.input(&x);
        let kv = tp.input(&k);
        let y = tp.conv2d(xv, kv, None, 2, 1, false).unwrap();
        let y = tp.gelu(y);
        let l = tp.mean(y);
        tp.backward(l).unwrap();
        (tp.scalar(l).to_bits(), tp.grad(kv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
        let mut tp = Tape::new();
        let x = tp.constant(&Tensor::new(vec![3, 4], data).unwrap());
        let y = tp.softmax(x, axis).unwrap();
        let v = tp.value(y);
        if axis == 1 {
            for r in 0..3 {
                let s: f64 = v[r * 4..r * 4 + 4].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        } else {
            for c in 0..4 {
                let s: f64 = (0..3).map(|r| v[r * 4 + c]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_in_open_unit_interval(data in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let mut tp = Tape::new();
        let x = tp.constant(&Tensor::from_vec(data));
        let y = tp.sigmoid(x);
        prop_assert!(tp.value(y).iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn bilinear_is_linear_in_the_map(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::randn(vec![2, 5, 4], 1.0, &mut rng);
        let g = Tensor::randn(vec![2, 5, 4], 1.0, &mut rng);
        let pts = Tensor::uniform(vec![20, 2], -1.0, 6.0, &mut rng);
        let mix: Vec<f64> = f.data().iter().zip(g.data()).map(|(x, y)| a * x + b * y).collect();
        let mut tp = Tape::new();
        let p = tp.constant(&pts);
        let (fv, gv) = (tp.constant(&f), tp.constant(&g));
        let mv = tp.constant_from(vec![2, 5, 4], mix).unwrap();
        let yf = tp.bilinear_sample(fv, p).unwrap();
        let yg = tp.bilinear_sample(gv, p).unwrap();
        let ym = tp.bilinear_sample(mv, p).unwrap();
        for i in 0..40 {
            let lhs = tp.value(ym)[i];
            let rhs = a * tp.value(yf)[i] + b * tp.value(yg)[i];
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }
}

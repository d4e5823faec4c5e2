//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttentionLayout, DeformLevel, Tape, Tensor, VarId};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
    pub pass: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Loss value and tape gradients of `f` with respect to every input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, grads))
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// Central differences `(f(x + eps) - f(x - eps)) / (2 eps)` per coordinate.
pub fn numeric_grads<F>(f: &F, inputs: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let fp = eval(f, &work)?;
            work[i].data_mut()[j] = x0 - eps;
            let fm = eval(f, &work)?;
            work[i].data_mut()[j] = x0;
            *gj = (fp - fm) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64) -> GradReport {
    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    let mut coords = 0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.iter().zip(n) {
            max_rel_err = max_rel_err.max(rel_err(x, y));
            max_abs_err = max_abs_err.max((x - y).abs());
            coords += 1;
        }
    }
    GradReport {
        max_rel_err,
        max_abs_err,
        coords,
        pass: max_rel_err < tol,
    }
}

/// Checks every coordinate of every input of a scalar function.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let (_, analytic) = analytic_grads(&f, inputs)?;
    let numeric = numeric_grads(&f, inputs, eps)?;
    Ok(compare(&analytic, &numeric, tol))
}

/// `sum(y * w)` for a fixed weight tensor, turning any output into a scalar
/// whose gradient exercises every output element.
pub fn weighted_sum(tape: &mut Tape, y: VarId, w: &Tensor) -> Result<VarId> {
    let w = tape.constant_from(tape.shape(y).to_vec(), w.data().to_vec())?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Probe weights for the output of `f` on `inputs`.
fn probe<F>(f: &F, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<Tensor>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| tape.input(t)).collect();
    let y = f(&mut tape, &vars)?;
    Ok(randn(tape.shape(y), rng))
}

fn check_op<F>(f: F, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let w = probe(&f, &inputs, rng)?;
    grad_check(
        |t: &mut Tape, v: &[VarId]| {
            let y = f(t, v)?;
            weighted_sum(t, y, &w)
        },
        &inputs,
        eps,
        tol,
    )
}

/// Finite-difference check of every differentiable tape operation on
/// randomised shapes drawn from `seed`.
pub fn op_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    let (n, din, dout) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
    let ins = vec![randn(&[n, din], r), randn(&[din, dout], r), randn(&[dout], r)];
    out.push(("affine", check_op(|t, v| t.affine(v[0], v[1], v[2]), ins, r, eps, tol)?));

    let (m, k, p) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let ins = vec![randn(&[k, m], r), randn(&[p, k], r)];
    out.push(("matmul", check_op(|t, v| t.matmul(v[0], v[1], true, true), ins, r, eps, tol)?));

    let d = r.random_range(2..9);
    let rows = r.random_range(1..5);
    let ins = vec![randn(&[rows, d], r), randn(&[d], r), randn(&[d], r)];
    out.push(("layer_norm", check_op(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), ins, r, eps, tol)?));

    let groups = r.random_range(1..4);
    let c = groups * r.random_range(1..3);
    let ins = vec![randn(&[c, 3, 2], r), randn(&[c], r), randn(&[c], r)];
    out.push(("group_norm", check_op(move |t, v| t.group_norm(v[0], groups, v[1], v[2], 1e-5), ins, r, eps, tol)?));

    let len = r.random_range(2..17);
    out.push(("sigmoid", check_op(|t, v| Ok(t.sigmoid(v[0])), vec![randn(&[len], r)], r, eps, tol)?));
    out.push(("gelu", check_op(|t, v| Ok(t.gelu(v[0])), vec![randn(&[len], r)], r, eps, tol)?));
    let axis = r.random_range(0..2);
    out.push(("softmax", check_op(move |t, v| t.softmax(v[0], axis), vec![randn(&[3, 4], r)], r, eps, tol)?));

    let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
    let (kh, stride, pad) = (r.random_range(1..4), r.random_range(1..3), r.random_range(0..2));
    let ins = vec![randn(&[cin, 5, 6], r), randn(&[cout, cin, kh, kh], r), randn(&[cout], r)];
    out.push(("conv2d", check_op(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad, false), ins, r, eps, tol)?));
    let ins = vec![randn(&[cin, 5, 5], r), randn(&[cin, 1, 3, 3], r)];
    out.push(("conv2d_depthwise", check_op(move |t, v| t.conv2d(v[0], v[1], None, stride, 1, true), ins, r, eps, tol)?));

    let pts = Tensor::uniform(vec![6, 2], -0.5, 6.5, r);
    let ins = vec![randn(&[2, 5, 6], r), pts];
    out.push(("bilinear_sample", check_op(|t, v| t.bilinear_sample(v[0], v[1]), ins, r, eps, tol)?));

    let (oh, ow) = (r.random_range(1..8), r.random_range(1..8));
    out.push(("interpolate", check_op(move |t, v| t.interpolate(v[0], oh, ow), vec![randn(&[2, 3, 4], r)], r, eps, tol)?));

    let heads = r.random_range(1..3);
    let dm = heads * 2;
    let (blocks, ql, kl) = (2, 3, 4);
    let allowed: Vec<bool> = (0..blocks * ql * kl).map(|i| i % 5 != 1).collect();
    let index: Vec<usize> = (0..ql * kl).map(|i| i % 5).collect();
    let layout = AttentionLayout {
        heads,
        blocks,
        q_len: ql,
        k_len: kl,
        allowed: Some(allowed),
        bias_index: Some(index),
    };
    let ins = vec![
        randn(&[blocks * ql, dm], r),
        randn(&[blocks * kl, dm], r),
        randn(&[blocks * kl, dm], r),
        randn(&[5, heads], r),
    ];
    out.push((
        "attention",
        check_op(move |t, v| t.attention(v[0], v[1], v[2], Some(v[3]), layout.clone()), ins, r, eps, tol)?,
    ));

    let levels = vec![DeformLevel { h: 4, w: 3, start: 0 }, DeformLevel { h: 2, w: 2, start: 12 }];
    let (nq, points) = (3, 2);
    let refs: Vec<f64> = (0..nq * 2).map(|_| r.random_range(0.1..0.9)).collect();
    let ins = vec![
        randn(&[16, dm], r),
        Tensor::uniform(vec![nq, heads * 2 * points * 2], -1.5, 1.5, r),
        Tensor::uniform(vec![nq, heads * 2 * points], 0.0, 1.0, r),
    ];
    out.push((
        "ms_deform_attn",
        check_op(
            move |t, v| t.ms_deform_attn(v[0], v[1], v[2], refs.clone(), levels.clone(), heads, points),
            ins,
            r,
            eps,
            tol,
        )?,
    ));

    let target: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
    out.push((
        "bce_with_logits",
        grad_check(|t, v| t.bce_with_logits(v[0], target.clone()), &[randn(&[6], r)], eps, tol)?,
    ));

    let ins = vec![randn(&[3, 2], r), randn(&[2, 2], r)];
    out.push((
        "rows",
        check_op(
            |t, v| {
                let c = t.concat_rows(&[v[0], v[1]])?;
                let s = t.slice_rows(c, 1, 3)?;
                let g = t.gather_rows(s, vec![Some(2), None, Some(0), Some(2)])?;
                let tr = t.transpose(g)?;
                t.reshape(tr, vec![8])
            },
            ins,
            r,
            eps,
            tol,
        )?,
    ));

    let ins = vec![randn(&[2, 3], r), Tensor::uniform(vec![2, 3], 0.5, 2.0, r), randn(&[3], r)];
    out.push((
        "elementwise",
        check_op(
            |t, v| {
                let a = t.mul(v[0], v[1])?;
                let b = t.div(a, v[1])?;
                let c = t.sub(b, v[1])?;
                let d = t.add_row(c, v[2])?;
                let e = t.scale(d, 0.7);
                let f = t.add_scalar(e, 0.3);
                let m = t.mean(f);
                let m = t.reshape(m, vec![1, 1])?;
                let fm = t.reshape(f, vec![6, 1])?;
                let both = t.concat_rows(&[fm, m])?;
                t.add(both, both)
            },
            ins,
            r,
            eps,
            tol,
        )?,
    ));

    Ok(out)
}

//! Query assignment, mask and mask-scoring losses, AdamW and the training
//! loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{binarize, mask_iou};
use crate::geometry::{box_iou, read_clamped, sample_points, Box, PointSampleConfig};
use crate::model::{ConfigMap, MaskHead};
use crate::synth::{DetectorOutput, FrozenDetector, SyntheticScene};
use crate::tensor::kernels::sigmoid;
use crate::tensor::gradcheck::GradReport;
use crate::tensor::{ParamGrads, ParamId, ParamStore, Tape, VarId};

// ------------------------------------------------------------ assignment

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// `(query, gt)` in acceptance order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

/// Greedy one-to-one matching by descending box IoU, accepting pairs at
/// or above `iou_threshold`. Ties go to the lower query, then gt, index.
pub fn match_queries(pred: &[Box], gt: &[Box], iou_threshold: f64) -> Assignment {
    let mut cands = Vec::new();
    for (q, p) in pred.iter().enumerate() {
        for (g, b) in gt.iter().enumerate() {
            let iou = box_iou(p, b);
            if iou >= iou_threshold {
                cands.push((iou, q, g));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut q_used = vec![false; pred.len()];
    let mut g_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, q, g) in cands {
        if !q_used[q] && !g_used[g] {
            q_used[q] = true;
            g_used[g] = true;
            pairs.push((q, g));
        }
    }
    Assignment {
        pairs,
        unmatched_queries: (0..pred.len()).filter(|&q| !q_used[q]).collect(),
    }
}

// ----------------------------------------------------------------- losses

/// A binary ground-truth mask restricted to the footprint of a region.
#[derive(Debug, Clone)]
pub struct RegionTarget {
    crop: Vec<f64>,
    fx0: usize,
    fy0: usize,
    fw: usize,
    fh: usize,
    region: Box,
}

impl RegionTarget {
    /// `gt` is an `h x w` binary mask, `region` an image-pixel box.
    pub fn new(gt: &[f64], h: usize, w: usize, region: &Box) -> Result<Self> {
        if gt.len() != h * w {
            return Err(crate::error::shape_err("mask_target", format!("{} values for {h}x{w}", gt.len())));
        }
        let region = region.checked(w as f64, h as f64)?;
        let (fx0, fy0, fx1, fy1) = region.footprint(w, h);
        let (fw, fh) = (fx1 - fx0, fy1 - fy0);
        let mut crop = Vec::with_capacity(fw * fh);
        for y in fy0..fy1 {
            crop.extend_from_slice(&gt[y * w + fx0..y * w + fx1]);
        }
        Ok(RegionTarget {
            crop,
            fx0,
            fy0,
            fw,
            fh,
            region,
        })
    }

    /// Ground truth at continuous points of a `gh x gw` grid laid over the
    /// region.
    pub fn at(&self, points: &[[f64; 2]], gh: usize, gw: usize) -> Vec<f64> {
        let sx = self.region.width() / gw as f64;
        let sy = self.region.height() / gh as f64;
        points
            .iter()
            .map(|p| {
                let x = self.region.x0 + p[0] * sx - self.fx0 as f64;
                let y = self.region.y0 + p[1] * sy - self.fy0 as f64;
                read_clamped(&self.crop, self.fh, self.fw, x, y)
            })
            .collect()
    }
}

/// Cell centres of a `gh x gw` grid in grid units.
pub fn grid_points(gh: usize, gw: usize) -> Vec<[f64; 2]> {
    (0..gh)
        .flat_map(|i| (0..gw).map(move |j| [j as f64 + 0.5, i as f64 + 0.5]))
        .collect()
}

/// BCE plus Dice (smoothing 1) between logits and targets, both `[P]`.
fn bce_dice(t: &mut Tape, logits: VarId, target: Vec<f64>) -> Result<VarId> {
    let n = target.len();
    let g_sum: f64 = target.iter().sum();
    let g = t.constant_from(vec![n, 1], target.clone())?;
    let x = t.reshape(logits, vec![n, 1])?;
    let bce = t.bce_with_logits(x, target)?;
    let p = t.sigmoid(x);
    let pg = t.mul(p, g)?;
    let inter = t.sum(pg);
    let num = t.scale(inter, 2.0);
    let num = t.add_scalar(num, 1.0);
    let p_sum = t.sum(p);
    let den = t.add_scalar(p_sum, g_sum + 1.0);
    let ratio = t.div(num, den)?;
    let neg = t.scale(ratio, -1.0);
    let dice = t.add_scalar(neg, 1.0);
    t.add(bce, dice)
}

/// Mask loss at explicit grid-unit points; logits `[gh*gw, 1]` (or any
/// shape with `gh*gw` elements) are read bilinearly, clamped to the grid.
pub fn mask_loss_at(t: &mut Tape, logits: VarId, gh: usize, gw: usize, target: &RegionTarget, points: &[[f64; 2]]) -> Result<VarId> {
    if points.is_empty() {
        return Err(crate::error::shape_err("mask_loss", "no points"));
    }
    let gt = target.at(points, gh, gw);
    let map = t.reshape(logits, vec![1, gh, gw])?;
    let clamped: Vec<f64> = points
        .iter()
        .flat_map(|p| [p[0].clamp(0.5, gw as f64 - 0.5), p[1].clamp(0.5, gh as f64 - 0.5)])
        .collect();
    let pts = t.constant_from(vec![points.len(), 2], clamped)?;
    let z = t.bilinear_sample(map, pts)?;
    bce_dice(t, z, gt)
}

/// BCE + Dice over the whole grid, or over uncertainty-sampled points.
pub fn mask_loss(
    t: &mut Tape,
    logits: VarId,
    gh: usize,
    gw: usize,
    target: &RegionTarget,
    ps: &PointSampleConfig,
    use_sampling: bool,
) -> Result<VarId> {
    if !use_sampling {
        let gt = target.at(&grid_points(gh, gw), gh, gw);
        return bce_dice(t, logits, gt);
    }
    let probs: Vec<f64> = t.value(logits).iter().map(|&z| sigmoid(z)).collect();
    let points = sample_points(&probs, gh, gw, ps)?;
    mask_loss_at(t, logits, gh, gw, target, &points)
}

/// `(iou_pred - target)^2` with the target treated as a constant.
pub fn mask_scoring_loss(t: &mut Tape, iou_pred: VarId, target: f64) -> Result<VarId> {
    let x = t.reshape(iou_pred, vec![])?;
    let d = t.add_scalar(x, -target);
    t.mul(d, d)
}

/// IoU of a thresholded prediction against a binary mask.
pub fn scoring_target(pred_probs: &[f64], gt: &[f64]) -> Result<f64> {
    mask_iou(&binarize(pred_probs), &binarize(gt))
}

// -------------------------------------------------------------- optimizer

pub const BASE_LR: f64 = 1.5e-4;
pub const WEIGHT_DECAY: f64 = 5e-5;

/// Step schedule: base rate, then divided by 10 at 90% and again at 95%.
pub fn lr_at(step: usize, total: usize, base: f64) -> f64 {
    let s = step as f64;
    let t = total as f64;
    if s < 0.9 * t {
        base
    } else if s < 0.95 * t {
        base / 10.0
    } else {
        base / 100.0
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update with learning rate `lr` to every parameter, in
    /// name order. Every parameter must carry a gradient buffer.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<ParamId> = store.ids_by_name();
        for &id in &ids {
            if store.get(id).tensor.grad.is_none() {
                return Err(Error::MissingGradient(store.get(id).name.clone()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in ids {
            let i = id.index();
            let p = &mut store.get_mut(id).tensor;
            let g = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w *= 1.0 - lr * self.weight_decay;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}

// ------------------------------------------------------------------- loop

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub points: PointSampleConfig,
    pub use_sampling: bool,
    pub score_weight: f64,
    pub iou_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 2,
            lr: BASE_LR,
            weight_decay: WEIGHT_DECAY,
            points: PointSampleConfig::default(),
            use_sampling: true,
            score_weight: 0.5,
            iou_threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn apply(&mut self, map: &mut ConfigMap) -> Result<()> {
        map.take_into("steps", &mut self.steps)?;
        map.take_into("batch_size", &mut self.batch_size)?;
        map.take_into("lr", &mut self.lr)?;
        map.take_into("weight_decay", &mut self.weight_decay)?;
        map.take_into("n_points", &mut self.points.n_points)?;
        map.take_into("oversample", &mut self.points.oversample)?;
        map.take_into("importance_ratio", &mut self.points.importance_ratio)?;
        map.take_into("use_sampling", &mut self.use_sampling)?;
        map.take_into("score_weight", &mut self.score_weight)?;
        map.take_into("iou_threshold", &mut self.iou_threshold)?;
        map.take_into("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        self.points.validate()
    }
}

/// A scene paired with its (already query-selected) detector output.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scene: SyntheticScene,
    pub det: DetectorOutput,
}

/// Runs the frozen detector once per scene and keeps the head's query
/// selection. The detector is deterministic, so caching its output is the
/// same as re-running it every step.
pub fn prepare_samples(scenes: Vec<SyntheticScene>, detector: &FrozenDetector, n_queries: usize) -> Result<Vec<TrainSample>> {
    scenes
        .into_iter()
        .map(|scene| {
            let det = detector.run(&scene)?;
            let det = det.select_top_queries(n_queries.min(det.n_queries()))?;
            Ok(TrainSample { scene, det })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in curve {
        s.push_str(&format!("{},{:e},{:e}\n", r.step, r.loss, r.lr));
    }
    s
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the point sampler for one matched query.
fn point_seed(seed: u64, step: usize, scene: usize, query: usize) -> u64 {
    mix(mix(mix(seed ^ 0x5eed) ^ step as u64) ^ ((scene as u64) << 20 | query as u64))
}

/// Scene indices of one step: consecutive slices of seeded per-epoch
/// permutations.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = step * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed) ^ epoch as u64);
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
        pos += 1;
    }
    out
}

/// Loss terms of one scene, each already divided by `norm`.
pub struct SceneLoss {
    pub loss: f64,
    pub mask_loss: f64,
    pub score_loss: f64,
    pub matched: usize,
    pub grads: ParamGrads,
}

/// Forward (and, if `backward`, backward) pass of one scene with losses
/// summed over matched queries and divided by `norm`.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss(
    head: &MaskHead,
    sample: &TrainSample,
    assignment: &Assignment,
    cfg: &TrainConfig,
    norm: f64,
    use_sampling: bool,
    point_seed_base: (usize, usize),
    backward: bool,
) -> Result<SceneLoss> {
    scene_loss_points(head, sample, assignment, cfg, norm, use_sampling, point_seed_base, None, backward).map(|r| r.0)
}

/// As [`scene_loss`], optionally with the sampled points of every matched
/// pair given instead of drawn; returns the points used.
#[allow(clippy::too_many_arguments)]
fn scene_loss_points(
    head: &MaskHead,
    sample: &TrainSample,
    assignment: &Assignment,
    cfg: &TrainConfig,
    norm: f64,
    use_sampling: bool,
    point_seed_base: (usize, usize),
    fixed_points: Option<&[Vec<[f64; 2]>]>,
    backward: bool,
) -> Result<(SceneLoss, Vec<Vec<[f64; 2]>>)> {
    let mut used = Vec::new();
    let mut out = SceneLoss {
        loss: 0.0,
        mask_loss: 0.0,
        score_loss: 0.0,
        matched: assignment.pairs.len(),
        grads: ParamGrads::default(),
    };
    if assignment.pairs.is_empty() {
        return Ok((out, used));
    }
    let (h, w) = (sample.scene.height(), sample.scene.width());
    let mut t = Tape::new();
    let sv = head.scene_forward(&mut t, &sample.det)?;
    let mut terms = Vec::new();
    for (k, &(q, g)) in assignment.pairs.iter().enumerate() {
        let qv = head.query_forward(&mut t, &sv, q, &sample.det.boxes[q], h, w)?;
        let gt = sample.scene.mask(g);
        let target = RegionTarget::new(gt, h, w, &qv.region)?;
        let ml = if use_sampling {
            let points = match fixed_points {
                Some(p) => p[k].clone(),
                None => {
                    let ps = PointSampleConfig {
                        seed: point_seed(cfg.seed, point_seed_base.0, point_seed_base.1, q),
                        ..cfg.points
                    };
                    let probs: Vec<f64> = t.value(qv.logits).iter().map(|&z| sigmoid(z)).collect();
                    sample_points(&probs, qv.gh, qv.gw, &ps)?
                }
            };
            let ml = mask_loss_at(&mut t, qv.logits, qv.gh, qv.gw, &target, &points)?;
            used.push(points);
            ml
        } else {
            let gt = target.at(&grid_points(qv.gh, qv.gw), qv.gh, qv.gw);
            bce_dice(&mut t, qv.logits, gt)?
        };
        out.mask_loss += t.scalar(ml) / norm;
        terms.push(ml);
        if let Some(iou) = head.score_forward(&mut t, &qv)? {
            let probs: Vec<f64> = t.value(qv.logits).iter().map(|&z| sigmoid(z)).collect();
            let full = head.full_res_mask(&qv, &probs, h, w)?;
            let target = scoring_target(full.data(), gt)?;
            let sl = mask_scoring_loss(&mut t, iou, target)?;
            out.score_loss += t.scalar(sl) / norm;
            terms.push(t.scale(sl, cfg.score_weight));
        }
    }
    let mut total = terms[0];
    for &x in &terms[1..] {
        total = t.add(total, x)?;
    }
    let total = t.scale(total, 1.0 / norm);
    out.loss = t.scalar(total);
    if backward {
        t.backward(total)?;
        out.grads = t.param_grads();
    }
    Ok((out, used))
}

/// Trains `head` in place and returns the loss curve. `on_step` sees
/// each record as it is produced.
pub fn train(head: &mut MaskHead, data: &[TrainSample], cfg: &TrainConfig, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = AdamW::new(&head.params, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batch_indices(data.len(), cfg.batch_size, step, cfg.seed);
        let assignments: Vec<Assignment> = idx
            .iter()
            .map(|&i| match_queries(&data[i].det.boxes, &data[i].scene.boxes, cfg.iou_threshold))
            .collect();
        let matched: usize = assignments.iter().map(|a| a.pairs.len()).sum();
        let lr = lr_at(step, cfg.steps, cfg.lr);
        head.params.zero_grads();
        let mut loss = 0.0;
        if matched > 0 {
            let h: &MaskHead = head;
            let results: Vec<Result<SceneLoss>> = idx
                .par_iter()
                .zip(&assignments)
                .map(|(&i, a)| scene_loss(h, &data[i], a, cfg, matched as f64, cfg.use_sampling, (step, i), true))
                .collect();
            // fixed summation order keeps runs bit-identical
            for r in results {
                let r = r?;
                loss += r.loss;
                head.params.accumulate(&r.grads);
            }
        }
        opt.update(&mut head.params, lr)?;
        let rec = LossRecord { step, loss, lr };
        on_step(&rec);
        curve.push(rec);
    }
    head.params.clear_grads();
    Ok(curve)
}

/// Mean dense (every grid cell) loss over matched pairs of a split.
pub fn dense_loss(head: &MaskHead, data: &[TrainSample], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut matched = 0;
    for (i, s) in data.iter().enumerate() {
        let a = match_queries(&s.det.boxes, &s.scene.boxes, cfg.iou_threshold);
        let r = scene_loss(head, s, &a, cfg, 1.0, false, (0, i), false)?;
        total += r.mask_loss + cfg.score_weight * r.score_loss;
        matched += r.matched;
    }
    Ok(if matched == 0 { 0.0 } else { total / matched as f64 })
}

/// Finite-difference check of the training loss of one scene against its
/// tape gradient, on `coords` random coordinates of every parameter.
///
/// The scoring head reads detached mask probabilities, so the tape
/// gradient of the other parameters is that of the mask term alone; they
/// are checked against differences of the mask term and the scoring
/// parameters against differences of the whole loss. Relative errors use
/// a denominator floor of `1e-3`.
#[allow(clippy::too_many_arguments)]
pub fn loss_grad_check(
    head: &mut MaskHead,
    sample: &TrainSample,
    cfg: &TrainConfig,
    use_sampling: bool,
    coords: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradReport> {
    let a = match_queries(&sample.det.boxes, &sample.scene.boxes, cfg.iou_threshold);
    let norm = a.pairs.len().max(1) as f64;
    // Points are chosen from the current prediction and carry no
    // gradient, so the perturbed evaluations reuse the base draw.
    let (base, points) = scene_loss_points(head, sample, &a, cfg, norm, use_sampling, (0, 0), None, true)?;
    let eval = |head: &MaskHead, backward: bool| {
        scene_loss_points(head, sample, &a, cfg, norm, use_sampling, (0, 0), Some(&points), backward).map(|r| r.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords: 0,
        pass: true,
    };
    let ids: Vec<ParamId> = head.params.ids_by_name();
    for id in ids {
        let scoring = head.params.get(id).name.starts_with("scoring.");
        let n = head.params.tensor(id).numel();
        for _ in 0..coords.min(n) {
            let k = rng.random_range(0..n);
            let analytic = base.grads.get(id).map_or(0.0, |g| g[k]);
            let orig = head.params.tensor(id).data()[k];
            let mut at = |v: f64| -> Result<f64> {
                head.params.get_mut(id).tensor.data_mut()[k] = v;
                let r = eval(head, false)?;
                Ok(if scoring { r.loss } else { r.mask_loss })
            };
            let lp = at(orig + eps)?;
            let lm = at(orig - eps)?;
            head.params.get_mut(id).tensor.data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let abs = (numeric - analytic).abs();
            let rel = abs / numeric.abs().max(analytic.abs()).max(1e-3);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.coords += 1;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Small head, detector and scene drawn from `seed`, with every module
/// switched on and parameters moved off their initial values (zero-init
/// branches then carry gradient and deformable sample positions leave
/// bilinear kinks).
pub fn grad_check_fixture(seed: u64) -> Result<(MaskHead, TrainSample)> {
    use crate::model::{EncoderKind, MaskHeadConfig};
    use crate::synth::{gen_scene, DetectorConfig, SceneSpec};
    let kinds = [
        (EncoderKind::Deformable, EncoderKind::Deformable),
        (EncoderKind::Window, EncoderKind::ConvNext),
        (EncoderKind::ConvNext, EncoderKind::Window),
    ];
    let (img_enc, box_enc) = kinds[(seed % 3) as usize];
    let cfg = MaskHeadConfig {
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
        query_o2o: seed % 2 == 1,
        scoring_channels: 4,
        scoring_hidden: 8,
        ffn_ratio: 2,
        img_enc,
        box_enc,
        img_depth: 1,
        box_depth: 1,
        n_queries: 5,
        ..MaskHeadConfig::default()
    };
    let mut head = MaskHead::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d);
    for id in head.params.ids_by_name() {
        for v in head.params.get_mut(id).tensor.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let spec = SceneSpec {
        h: 64,
        w: 64,
        ..Default::default()
    };
    let scene = gen_scene(seed, &spec)?;
    let det = FrozenDetector::new(
        seed,
        DetectorConfig {
            d: 16,
            n_queries: 5,
            ..Default::default()
        },
    )?;
    let det = det.run(&scene)?;
    Ok((head, TrainSample { scene, det }))
}

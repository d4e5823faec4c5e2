//! The trainable mask head: neck, encoders, mapper, query encoder,
//! mask prediction and mask scoring.

mod blocks;
mod checkpoint;
mod config;

pub use blocks::{
    map_to_tokens, sine_position, tokens_to_map, ConvNextBlock, CrossAttention, DeformContext, DeformableBlock, FeedForward,
    Linear, Mlp, Norm, WindowBlock, WindowPlan, LN_EPS,
};
pub use checkpoint::{load_checkpoint, load_checkpoint_with_meta, save_checkpoint, save_checkpoint_with_meta, CHECKPOINT_MAGIC};
pub use config::{ConfigMap, EncoderKind, MaskHeadConfig, KEY_DOCS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::geometry::{paste_mask, roi_align, Box};
use crate::synth::DetectorOutput;
use crate::tensor::kernels::{resize_bilinear, sigmoid};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, VarId};
use blocks::Builder;

#[derive(Debug, Clone)]
enum EncBlock {
    Deformable(DeformableBlock),
    Window(WindowBlock),
    ConvNext(ConvNextBlock),
}

#[derive(Debug, Clone)]
struct Neck {
    k: ParamId,
    b: ParamId,
    gn_g: ParamId,
    gn_b: ParamId,
}

/// Convolution stack plus MLP regressing the IoU of a predicted mask.
#[derive(Debug, Clone)]
struct ScoringHead {
    c1k: ParamId,
    c1b: ParamId,
    c2k: ParamId,
    c2b: ParamId,
    fc1: Linear,
    fc2: Linear,
}

/// Per-module parameter counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub neck: usize,
    pub img_enc: usize,
    pub img_enc_block: usize,
    pub mapper: usize,
    pub box_enc: usize,
    pub box_enc_block: usize,
    pub query_enc: usize,
    pub scoring: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.neck + self.img_enc + self.mapper + self.box_enc + self.query_enc + self.scoring
    }

    pub fn rows(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("neck", self.neck),
            ("img_enc", self.img_enc),
            ("mapper", self.mapper),
            ("box_enc", self.box_enc),
            ("query_enc", self.query_enc),
            ("scoring", self.scoring),
            ("total", self.total()),
        ]
    }
}

fn encoder_block_count(cfg: &MaskHeadConfig, kind: EncoderKind, d: usize, levels: usize) -> usize {
    match kind {
        EncoderKind::None => 0,
        EncoderKind::Deformable => DeformableBlock::count(d, cfg.deform_heads, levels, cfg.deform_points, cfg.ffn_ratio),
        EncoderKind::Window => WindowBlock::count(d, cfg.window_heads, cfg.window_size, cfg.ffn_ratio),
        EncoderKind::ConvNext => ConvNextBlock::count(d, cfg.ffn_ratio),
    }
}

fn scoring_flat(cfg: &MaskHeadConfig) -> usize {
    let down = |n: usize| n.div_ceil(2);
    cfg.scoring_channels * down(down(cfg.roi_h)) * down(down(cfg.roi_w))
}

/// Closed-form parameter count of a configuration.
pub fn count_params(cfg: &MaskHeadConfig) -> ParamCount {
    let d = cfg.d;
    let fd = cfg.feat_dim();
    let img_enc_block = encoder_block_count(cfg, cfg.img_enc, d, cfg.deform_levels);
    let box_enc_block = encoder_block_count(cfg, cfg.box_enc, fd, 1);
    let mut query_enc = 0;
    if cfg.query_proj() {
        query_enc += Linear::count(d, fd);
    }
    if cfg.query_o2o {
        query_enc += CrossAttention::count(fd);
    }
    if cfg.b2o_active() {
        query_enc += CrossAttention::count(fd);
    }
    if cfg.query_ffn {
        query_enc += FeedForward::count(fd, cfg.ffn_ratio);
    }
    let scoring = if cfg.scoring_active() {
        let ch = cfg.scoring_channels;
        ch * (fd + 1) * 9 + ch + ch * ch * 9 + ch + Linear::count(scoring_flat(cfg), cfg.scoring_hidden) + Linear::count(cfg.scoring_hidden, 1)
    } else {
        0
    };
    ParamCount {
        neck: if cfg.neck { d * d + d + 2 * d } else { 0 },
        img_enc: img_enc_block * cfg.img_blocks(),
        img_enc_block,
        mapper: if cfg.mapper { Linear::count(d, fd) } else { 0 },
        box_enc: box_enc_block * cfg.box_blocks(),
        box_enc_block,
        query_enc,
        scoring,
    }
}

impl MaskHeadConfig {
    /// Mask scoring needs RoI features and is skipped on the full-image path.
    pub fn scoring_active(&self) -> bool {
        self.mask_scoring && !self.full_image_path
    }
}

/// Scene-level values shared by every query of one image.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    /// Fused, mapped features `[fd, H/4, W/4]`.
    pub fmap: VarId,
    /// The same as tokens `[H/4 * W/4, fd]`.
    pub ftok: VarId,
    /// Projected and (optionally) self-attended queries `[n, fd]`.
    pub queries: VarId,
    pub h4: usize,
    pub w4: usize,
}

/// Mask logits of one query over its prediction grid.
#[derive(Debug, Clone, Copy)]
pub struct QueryVars {
    /// `[gh * gw, 1]`
    pub logits: VarId,
    pub gh: usize,
    pub gw: usize,
    /// Image-pixel region the grid covers.
    pub region: Box,
    /// RoI features `[gh * gw, fd]` on the box path.
    pub roi: Option<VarId>,
}

/// A scored instance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    /// Index among the selected queries.
    pub query: usize,
    pub label: usize,
    pub class_score: f64,
    pub iou_pred: Option<f64>,
    pub score: f64,
    pub bbox: Box,
    /// Full-resolution foreground probabilities `[H, W]`.
    pub mask: Tensor,
}

impl InstancePrediction {
    pub fn binary(&self) -> Vec<bool> {
        self.mask.data().iter().map(|&p| p > 0.5).collect()
    }
}

/// Class score times the mean foreground probability over pixels with
/// `p > 0.5`; zero when no pixel passes.
pub fn confidence_score(class_score: f64, probs: &[f64]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for &p in probs {
        if p > 0.5 {
            s += p;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        class_score * s / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct MaskHead {
    pub cfg: MaskHeadConfig,
    pub params: ParamStore,
    neck: Option<Neck>,
    img_enc: Vec<EncBlock>,
    mapper: Option<Linear>,
    box_enc: Vec<EncBlock>,
    query_proj: Option<Linear>,
    o2o: Option<CrossAttention>,
    b2o: Option<CrossAttention>,
    ffn: Option<FeedForward>,
    scoring: Option<ScoringHead>,
}

fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn build_encoder(
    b: &mut Builder<'_>,
    cfg: &MaskHeadConfig,
    kind: EncoderKind,
    depth: usize,
    d: usize,
    levels: usize,
) -> Result<Vec<EncBlock>> {
    (0..depth)
        .map(|i| {
            b.scope(&i.to_string(), |b| {
                Ok(match kind {
                    EncoderKind::Deformable => EncBlock::Deformable(DeformableBlock::build(
                        b,
                        d,
                        cfg.deform_heads,
                        levels,
                        cfg.deform_points,
                        cfg.ffn_ratio,
                    )?),
                    EncoderKind::Window => {
                        EncBlock::Window(WindowBlock::build(b, d, cfg.window_heads, cfg.window_size, i % 2 == 1, cfg.ffn_ratio)?)
                    }
                    EncoderKind::ConvNext => EncBlock::ConvNext(ConvNextBlock::build(b, d, cfg.ffn_ratio)?),
                    EncoderKind::None => unreachable!("no blocks are built for an absent encoder"),
                })
            })
        })
        .collect()
}

/// Runs encoder blocks over tokens laid out as the given stacked levels.
fn run_encoder(t: &mut Tape, s: &ParamStore, blocks: &[EncBlock], x: VarId, sizes: &[(usize, usize)], d: usize) -> Result<VarId> {
    let mut x = x;
    let ctx = match blocks.first() {
        Some(EncBlock::Deformable(_)) => {
            let ctx = DeformContext::new(sizes, d);
            let pos = t.constant_from(vec![ctx.tokens(), d], ctx.pos.clone())?;
            Some((ctx, pos))
        }
        _ => None,
    };
    for blk in blocks {
        x = match blk {
            EncBlock::Deformable(b) => {
                let (ctx, pos) = ctx.as_ref().expect("context built for deformable blocks");
                b.forward(t, s, x, *pos, &ctx.refs, &ctx.levels)?
            }
            EncBlock::Window(b) => b.forward(t, s, x, sizes[0].0, sizes[0].1)?,
            EncBlock::ConvNext(b) => b.forward(t, s, x, sizes[0].0, sizes[0].1)?,
        };
    }
    Ok(x)
}

impl MaskHead {
    pub fn new(cfg: MaskHeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let fd = cfg.feat_dim();
        let mut store = ParamStore::new();

        let mut rng = module_rng(seed, 1);
        let neck = if cfg.neck {
            let mut b = Builder::new(&mut store, &mut rng);
            let bound = (6.0 / (2 * d) as f64).sqrt();
            Some(Neck {
                k: b.uniform("neck.conv.k", vec![d, d, 1, 1], bound)?,
                b: b.tensor("neck.conv.b", Tensor::zeros(vec![d]))?,
                gn_g: b.tensor("neck.gn.g", Tensor::full(vec![d], 1.0))?,
                gn_b: b.tensor("neck.gn.b", Tensor::zeros(vec![d]))?,
            })
        } else {
            None
        };

        let mut rng = module_rng(seed, 2);
        let img_enc = {
            let mut b = Builder::new(&mut store, &mut rng);
            b.scope("img_enc", |b| build_encoder(b, &cfg, cfg.img_enc, cfg.img_blocks(), d, cfg.deform_levels))?
        };

        let mut rng = module_rng(seed, 3);
        let mapper = if cfg.mapper {
            Some(Builder::new(&mut store, &mut rng).linear("mapper", d, fd)?)
        } else {
            None
        };

        let mut rng = module_rng(seed, 4);
        let box_enc = {
            let mut b = Builder::new(&mut store, &mut rng);
            b.scope("box_enc", |b| build_encoder(b, &cfg, cfg.box_enc, cfg.box_blocks(), fd, 1))?
        };

        let mut rng = module_rng(seed, 5);
        let (query_proj, o2o, b2o, ffn) = {
            let mut b = Builder::new(&mut store, &mut rng);
            b.scope("query", |b| {
                let proj = if cfg.query_proj() { Some(b.linear("proj", d, fd)?) } else { None };
                let o2o = if cfg.query_o2o {
                    Some(b.scope("o2o", |b| CrossAttention::build(b, fd, cfg.query_heads))?)
                } else {
                    None
                };
                let b2o = if cfg.b2o_active() {
                    Some(b.scope("b2o", |b| CrossAttention::build(b, fd, cfg.query_heads))?)
                } else {
                    None
                };
                let ffn = if cfg.query_ffn {
                    Some(b.scope("ffn", |b| FeedForward::build(b, fd, cfg.ffn_ratio))?)
                } else {
                    None
                };
                Ok((proj, o2o, b2o, ffn))
            })?
        };

        let mut rng = module_rng(seed, 6);
        let scoring = if cfg.scoring_active() {
            let ch = cfg.scoring_channels;
            let mut b = Builder::new(&mut store, &mut rng);
            Some(b.scope("scoring", |b| {
                let b1 = (6.0 / ((fd + 1) * 9) as f64).sqrt();
                let b2 = (6.0 / (ch * 9) as f64).sqrt();
                Ok(ScoringHead {
                    c1k: b.uniform("conv1.k", vec![ch, fd + 1, 3, 3], b1)?,
                    c1b: b.tensor("conv1.b", Tensor::zeros(vec![ch]))?,
                    c2k: b.uniform("conv2.k", vec![ch, ch, 3, 3], b2)?,
                    c2b: b.tensor("conv2.b", Tensor::zeros(vec![ch]))?,
                    fc1: b.linear("fc1", scoring_flat(&cfg), cfg.scoring_hidden)?,
                    fc2: b.linear("fc2", cfg.scoring_hidden, 1)?,
                })
            })?)
        } else {
            None
        };

        Ok(MaskHead {
            cfg,
            params: store,
            neck,
            img_enc,
            mapper,
            box_enc,
            query_proj,
            o2o,
            b2o,
            ffn,
            scoring,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Overwrites a parameter by name, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .params
            .id_of(name)
            .ok_or_else(|| crate::Error::Config(format!("no parameter `{name}`")))?;
        let p = self.params.get_mut(id);
        if p.tensor.shape() != value.shape() {
            return Err(shape_err("set_param", format!("{name}: {:?} vs {:?}", p.tensor.shape(), value.shape())));
        }
        p.tensor.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Zeroes every parameter whose name ends with one of `suffixes`.
    pub fn zero_params(&mut self, suffixes: &[&str]) -> usize {
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, p)| suffixes.iter().any(|s| p.name.ends_with(s)))
            .map(|(id, _)| id)
            .collect();
        for &id in &ids {
            self.params.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        ids.len()
    }

    fn check_detector(&self, det: &DetectorOutput) -> Result<()> {
        if det.d() != self.cfg.d || det.backbone_c1.shape()[0] != self.cfg.d {
            return Err(shape_err(
                "mask_head",
                format!("detector width {} but the head expects {}", det.d(), self.cfg.d),
            ));
        }
        if det.enc_levels.len() != 4 {
            return Err(shape_err("mask_head", format!("{} encoder levels", det.enc_levels.len())));
        }
        Ok(())
    }

    /// Refined `E_1` as a `[d, H/8, W/8]` map.
    pub fn encode_image(&self, t: &mut Tape, det: &DetectorOutput) -> Result<VarId> {
        let s = &self.params;
        let e1 = t.constant(&det.enc_levels[0]);
        if self.img_enc.is_empty() {
            return Ok(e1);
        }
        let (h8, w8) = (det.enc_levels[0].shape()[1], det.enc_levels[0].shape()[2]);
        let d = self.cfg.d;
        match self.cfg.img_enc {
            EncoderKind::Deformable => {
                let mut toks = Vec::new();
                let mut sizes = Vec::new();
                for e in &det.enc_levels {
                    let v = t.constant(e);
                    toks.push(map_to_tokens(t, v)?);
                    sizes.push((e.shape()[1], e.shape()[2]));
                }
                let x = t.concat_rows(&toks)?;
                let y = run_encoder(t, s, &self.img_enc, x, &sizes, d)?;
                let y1 = t.slice_rows(y, 0, h8 * w8)?;
                tokens_to_map(t, y1, h8, w8)
            }
            _ => {
                let x = map_to_tokens(t, e1)?;
                let y = run_encoder(t, s, &self.img_enc, x, &[(h8, w8)], d)?;
                tokens_to_map(t, y, h8, w8)
            }
        }
    }

    /// Fused features, mapper and scene-level query processing.
    pub fn scene_forward(&self, t: &mut Tape, det: &DetectorOutput) -> Result<SceneVars> {
        self.check_detector(det)?;
        let s = &self.params;
        let (h4, w4) = (det.backbone_c1.shape()[1], det.backbone_c1.shape()[2]);
        let c1 = t.constant(&det.backbone_c1);
        let c1 = match &self.neck {
            Some(n) => {
                let (k, b) = (t.param(s, n.k), t.param(s, n.b));
                let y = t.conv2d(c1, k, Some(b), 1, 0, false)?;
                let (g, bb) = (t.param(s, n.gn_g), t.param(s, n.gn_b));
                t.group_norm(y, self.cfg.neck_groups, g, bb, LN_EPS)?
            }
            None => c1,
        };
        let e1 = self.encode_image(t, det)?;
        let up = t.interpolate(e1, h4, w4)?;
        let fused = t.add(c1, up)?;
        let tok = map_to_tokens(t, fused)?;
        let (ftok, fmap) = match &self.mapper {
            Some(m) => {
                let y = m.forward(t, s, tok)?;
                (y, tokens_to_map(t, y, h4, w4)?)
            }
            None => (tok, fused),
        };
        let mut q = t.constant(&det.queries);
        if let Some(p) = &self.query_proj {
            q = p.forward(t, s, q)?;
        }
        if let Some(o) = &self.o2o {
            q = o.forward(t, s, q, None)?;
        }
        Ok(SceneVars {
            fmap,
            ftok,
            queries: q,
            h4,
            w4,
        })
    }

    /// Mask logits for query `i` with detector box `bbox` (image pixels).
    pub fn query_forward(&self, t: &mut Tape, sv: &SceneVars, i: usize, bbox: &Box, image_h: usize, image_w: usize) -> Result<QueryVars> {
        let s = &self.params;
        let mut q = t.slice_rows(sv.queries, i, 1)?;
        let fd = self.cfg.feat_dim();
        if self.cfg.full_image_path {
            if let Some(f) = &self.ffn {
                q = f.forward(t, s, q)?;
            }
            let logits = t.matmul(sv.ftok, q, false, true)?;
            return Ok(QueryVars {
                logits,
                gh: sv.h4,
                gw: sv.w4,
                region: Box::new(0.0, 0.0, image_w as f64, image_h as f64),
                roi: None,
            });
        }
        let (rh, rw) = (self.cfg.roi_h, self.cfg.roi_w);
        let sx = sv.w4 as f64 / image_w as f64;
        let sy = sv.h4 as f64 / image_h as f64;
        let region = bbox.clamped(image_w as f64, image_h as f64);
        let fb = Box::new(region.x0 * sx, region.y0 * sy, region.x1 * sx, region.y1 * sy);
        let mut r = roi_align(t, sv.fmap, &fb, rh, rw)?;
        if !self.box_enc.is_empty() {
            r = run_encoder(t, s, &self.box_enc, r, &[(rh, rw)], fd)?;
        }
        if let Some(b) = &self.b2o {
            let pos = t.constant_from(vec![rh * rw, fd], sine_position(rh, rw, fd))?;
            q = b.forward(t, s, q, Some((r, pos)))?;
        }
        if let Some(f) = &self.ffn {
            q = f.forward(t, s, q)?;
        }
        let logits = t.matmul(r, q, false, true)?;
        Ok(QueryVars {
            logits,
            gh: rh,
            gw: rw,
            region,
            roi: Some(r),
        })
    }

    /// Predicted IoU `[1, 1]` from detached mask probabilities and RoI
    /// features. `None` when scoring is disabled.
    pub fn score_forward(&self, t: &mut Tape, qv: &QueryVars) -> Result<Option<VarId>> {
        let (Some(h), Some(r)) = (&self.scoring, qv.roi) else {
            return Ok(None);
        };
        let s = &self.params;
        let probs = t.sigmoid(qv.logits);
        let probs = t.detach(probs);
        let pm = t.reshape(probs, vec![1, qv.gh, qv.gw])?;
        let r = t.detach(r);
        let rm = tokens_to_map(t, r, qv.gh, qv.gw)?;
        let x = t.concat_rows(&[pm, rm])?;
        let (k, b) = (t.param(s, h.c1k), t.param(s, h.c1b));
        let x = t.conv2d(x, k, Some(b), 2, 1, false)?;
        let x = t.gelu(x);
        let (k, b) = (t.param(s, h.c2k), t.param(s, h.c2b));
        let x = t.conv2d(x, k, Some(b), 2, 1, false)?;
        let x = t.gelu(x);
        let n: usize = t.shape(x).iter().product();
        let x = t.reshape(x, vec![1, n])?;
        let x = h.fc1.forward(t, s, x)?;
        let x = t.gelu(x);
        let x = h.fc2.forward(t, s, x)?;
        Ok(Some(t.sigmoid(x)))
    }

    /// Pastes grid probabilities into an `h x w` canvas.
    pub fn full_res_mask(&self, qv: &QueryVars, probs: &[f64], h: usize, w: usize) -> Result<Tensor> {
        if self.cfg.full_image_path {
            Tensor::new(vec![h, w], resize_bilinear(probs, 1, qv.gh, qv.gw, h, w))
        } else {
            paste_mask(probs, qv.gh, qv.gw, &qv.region, h, w)
        }
    }

    /// Final instance score from class score, predicted IoU and mask.
    pub fn instance_score(&self, class_score: f64, iou_pred: Option<f64>, mask: &[f64]) -> f64 {
        match iou_pred {
            Some(iou) if self.cfg.score_compose => confidence_score(class_score * iou, mask),
            Some(iou) => class_score * iou,
            None => confidence_score(class_score, mask),
        }
    }

    /// Instance masks for the top `n_queries` detector queries, best score
    /// first.
    pub fn segment(&self, det: &DetectorOutput) -> Result<Vec<InstancePrediction>> {
        let n = self.cfg.n_queries.min(det.n_queries());
        let det = det.select_top_queries(n)?;
        let (h, w) = (det.image_h, det.image_w);
        let mut t = Tape::new();
        let sv = self.scene_forward(&mut t, &det)?;
        // Later queries only read these two values, so the scene part of
        // the tape can be dropped.
        let fmap = t.to_tensor(sv.fmap);
        let ftok = t.to_tensor(sv.ftok);
        let queries = t.to_tensor(sv.queries);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            t.reset();
            let sv = SceneVars {
                fmap: t.constant(&fmap),
                ftok: t.constant(&ftok),
                queries: t.constant(&queries),
                h4: sv.h4,
                w4: sv.w4,
            };
            let qv = self.query_forward(&mut t, &sv, i, &det.boxes[i], h, w)?;
            let probs: Vec<f64> = t.value(qv.logits).iter().map(|&z| sigmoid(z)).collect();
            let mask = self.full_res_mask(&qv, &probs, h, w)?;
            let iou_pred = self.score_forward(&mut t, &qv)?.map(|v| t.scalar(v));
            let (label, c) = det.top_class(i);
            let score = self.instance_score(c, iou_pred, mask.data());
            out.push(InstancePrediction {
                query: i,
                label,
                class_score: c,
                iou_pred,
                score,
                bbox: det.boxes[i],
                mask,
            });
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
        Ok(out)
    }
}

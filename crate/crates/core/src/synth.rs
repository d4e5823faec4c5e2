//! Synthetic scenes and the fixed-weight detector stub that stands in for a
//! frozen DETR: it emits queries, class scores, boxes and a feature pyramid.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::tensor::io::{self, DType};
use crate::tensor::kernels::{conv2d_forward, ConvGeom};
use crate::tensor::Tensor;

/// Shape family rendered for each class index.
pub const SHAPE_NAMES: [&str; 3] = ["rectangle", "ellipse", "triangle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub max_instances: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            h: 128,
            w: 128,
            num_classes: 3,
            max_instances: 3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || !self.h.is_multiple_of(64) || !self.w.is_multiple_of(64) {
            return Err(Error::InvalidSpec(format!("size {}x{} must be positive multiples of 64", self.h, self.w)));
        }
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return Err(Error::InvalidSpec(format!("num_classes {} outside 1..=3", self.num_classes)));
        }
        if self.max_instances == 0 {
            return Err(Error::InvalidSpec("max_instances must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]` in `[0, 1]`, every value exactly representable in f32.
    pub image: Tensor,
    /// `[K, H, W]` with entries 0 or 1.
    pub masks: Tensor,
    pub boxes: Vec<Box>,
    pub labels: Vec<usize>,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mask(&self, k: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.masks.data()[k * n..(k + 1) * n]
    }

    /// Stable per-scene key derived from the image contents, used to seed
    /// the detector stub's per-scene randomness.
    pub fn key(&self) -> u64 {
        let mut h = Sha256::new();
        for v in self.image.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Tight pixel bound of a binary mask, `x1`/`y1` exclusive.
pub fn mask_bound(mask: &[f64], h: usize, w: usize) -> Option<Box> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| Box::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    tri: [[f64; 2]; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.class {
            0 => u.abs() <= self.a && v.abs() <= self.b,
            1 => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            _ => {
                let [p, q, r] = self.tri;
                let side = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let (d1, d2, d3) = (side(p, q), side(q, r), side(r, p));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }

    fn extent(&self) -> f64 {
        self.a.max(self.b) * 1.5
    }
}

const SUPERSAMPLE: usize = 4;

/// Fractional coverage of every pixel by `shape` (4x4 supersampling).
fn coverage(shape: &Shape, h: usize, w: usize) -> Vec<f64> {
    let mut cov = vec![0.0; h * w];
    let r = shape.extent();
    let ylo = (shape.cy - r).floor().max(0.0) as usize;
    let yhi = ((shape.cy + r).ceil().max(0.0) as usize).min(h);
    let xlo = (shape.cx - r).floor().max(0.0) as usize;
    let xhi = ((shape.cx + r).ceil().max(0.0) as usize).min(w);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in ylo..yhi {
        for x in xlo..xhi {
            let mut n = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if shape.contains(px, py) {
                        n += 1;
                    }
                }
            }
            cov[y * w + x] = n as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    cov
}

fn random_shape(rng: &mut ChaCha8Rng, class: usize, h: usize, w: usize) -> Shape {
    let scale = h.min(w) as f64;
    let a = rng.random_range(0.09..0.24) * scale;
    let b = a * rng.random_range(0.55..1.0);
    let (a, b) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
    let margin = 0.06 * scale;
    let cx = rng.random_range(margin..w as f64 - margin);
    let cy = rng.random_range(margin..h as f64 - margin);
    let angle = rng.random_range(-0.6..0.6);
    let mut tri = [[0.0; 2]; 3];
    let t0 = rng.random_range(0.0..std::f64::consts::TAU);
    for (k, p) in tri.iter_mut().enumerate() {
        let t = t0 + k as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.35..0.35);
        let rad = a.max(b) * rng.random_range(0.85..1.15);
        *p = [cx + rad * t.cos(), cy + rad * t.sin()];
    }
    Shape {
        class,
        cx,
        cy,
        a,
        b,
        angle,
        tri,
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn color_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn q32(v: f64) -> f64 {
    v.clamp(0.0, 1.0) as f32 as f64
}

const MIN_VISIBLE_FRACTION: f64 = 0.45;
const MIN_VISIBLE_PIXELS: usize = 40;

/// Renders one deterministic scene.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (h, w) = (spec.h, spec.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // textured background: base colour, two sinusoids and pixel noise
    let base = random_color(&mut rng);
    let freq = [rng.random_range(0.02..0.12), rng.random_range(0.02..0.12)];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.04..0.12);
    let mut image = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let wave = (x as f64 * freq[0] + y as f64 * freq[1] + phase + c as f64).sin();
                let noise: f64 = StandardNormal.sample(&mut rng);
                image[(c * h + y) * w + x] = base[c] + amp * wave + 0.03 * noise;
            }
        }
    }

    let k_target = rng.random_range(1..=spec.max_instances);
    let mut shapes: Vec<(Shape, Vec<f64>, [f64; 3])> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < k_target && attempts < 50 {
        attempts += 1;
        let class = rng.random_range(0..spec.num_classes);
        let shape = random_shape(&mut rng, class, h, w);
        let mut color = random_color(&mut rng);
        while color_dist(color, base) < 0.3 {
            color = random_color(&mut rng);
        }
        let cov = coverage(&shape, h, w);
        let own: usize = cov.iter().filter(|&&c| c >= 0.5).count();
        if own < MIN_VISIBLE_PIXELS {
            continue;
        }
        // the new shape goes on top; every shape must stay visible enough
        let mut trial: Vec<&Vec<f64>> = shapes.iter().map(|(_, c, _)| c).collect();
        trial.push(&cov);
        if !visible_masks(&trial, h * w)
            .iter()
            .zip(&trial)
            .all(|(vis, cov)| {
                let n = vis.iter().filter(|&&v| v > 0.5).count();
                let total = cov.iter().filter(|&&c| c >= 0.5).count();
                n >= MIN_VISIBLE_PIXELS && n as f64 >= MIN_VISIBLE_FRACTION * total as f64
            })
        {
            continue;
        }
        shapes.push((shape, cov, color));
    }
    if shapes.is_empty() {
        return Err(Error::InvalidSpec(format!("could not place any shape on a {h}x{w} canvas")));
    }

    for (_, cov, color) in &shapes {
        let shade = rng.random_range(-0.04..0.04);
        for c in 0..3 {
            for p in 0..h * w {
                if cov[p] > 0.0 {
                    let i = c * h * w + p;
                    let fg = color[c] + shade * ((p % w) as f64 / w as f64 - 0.5);
                    image[i] = cov[p] * fg + (1.0 - cov[p]) * image[i];
                }
            }
        }
    }
    let image: Vec<f64> = image.into_iter().map(q32).collect();

    let covs: Vec<&Vec<f64>> = shapes.iter().map(|(_, c, _)| c).collect();
    let vis = visible_masks(&covs, h * w);
    let mut masks = Vec::with_capacity(vis.len() * h * w);
    let mut boxes = Vec::with_capacity(vis.len());
    for m in &vis {
        boxes.push(mask_bound(m, h, w).expect("visible mask is non-empty"));
        masks.extend_from_slice(m);
    }
    let labels = shapes.iter().map(|(s, _, _)| s.class).collect();
    Ok(SyntheticScene {
        image: Tensor::new(vec![3, h, w], image)?,
        masks: Tensor::new(vec![vis.len(), h, w], masks)?,
        boxes,
        labels,
    })
}

/// Binary visible masks given coverages in drawing order (later on top).
fn visible_masks(covs: &[&Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(covs.len());
    for (k, cov) in covs.iter().enumerate() {
        let mut m = vec![0.0; n];
        for p in 0..n {
            let covered = covs[k + 1..].iter().any(|c| c[p] >= 0.5);
            if cov[p] >= 0.5 && !covered {
                m[p] = 1.0;
            }
        }
        out.push(m);
    }
    out
}

// ------------------------------------------------------------------ detector

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub d: usize,
    pub n_queries: usize,
    pub box_noise: f64,
    pub num_classes: usize,
    /// Which encoder "layer" the stride-8 map is taken from.
    pub enc_layer_index: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            d: 128,
            n_queries: 10,
            box_noise: 0.05,
            num_classes: 3,
            enc_layer_index: 4,
        }
    }
}

const QUERY_NOISE_DIM: usize = 8;

/// Fixed random-weight feature pyramid plus query synthesis. Nothing here
/// is ever trained.
#[derive(Debug, Clone)]
pub struct FrozenDetector {
    pub cfg: DetectorConfig,
    pub weights_seed: u64,
    weights: Vec<(String, Tensor)>,
}

/// Everything the mask head consumes from the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    /// `[Nq, d]`
    pub queries: Tensor,
    /// `[Nq, num_classes]`, each in `(0, 1)`.
    pub class_scores: Tensor,
    /// Image-pixel boxes.
    pub boxes: Vec<Box>,
    /// `E_1..E_4` at strides 8, 16, 32, 64, each `[d, h, w]`.
    pub enc_levels: Vec<Tensor>,
    /// `[d, H/4, W/4]`
    pub backbone_c1: Tensor,
    pub enc_layer_index: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Ground-truth index a query was built from, `None` for distractors.
    pub source_gt: Vec<Option<usize>>,
}

impl DetectorOutput {
    pub fn n_queries(&self) -> usize {
        self.boxes.len()
    }

    pub fn d(&self) -> usize {
        self.queries.shape()[1]
    }

    /// `c_i`: the best class score and its label.
    pub fn top_class(&self, i: usize) -> (usize, f64) {
        let c = self.class_scores.shape()[1];
        let row = &self.class_scores.data()[i * c..(i + 1) * c];
        let mut best = (0, row[0]);
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (k, v);
            }
        }
        best
    }

    /// Keeps the `n` queries with the highest top class score, ties broken
    /// by original index.
    pub fn select_top_queries(&self, n: usize) -> Result<DetectorOutput> {
        let nq = self.n_queries();
        if n == 0 || n > nq {
            return Err(Error::InvalidN { n, available: nq });
        }
        let mut order: Vec<usize> = (0..nq).collect();
        order.sort_by(|&a, &b| self.top_class(b).1.total_cmp(&self.top_class(a).1).then(a.cmp(&b)));
        order.truncate(n);
        Ok(self.subset(&order))
    }

    pub fn subset(&self, idx: &[usize]) -> DetectorOutput {
        let d = self.d();
        let c = self.class_scores.shape()[1];
        let mut q = Vec::with_capacity(idx.len() * d);
        let mut s = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            q.extend_from_slice(&self.queries.data()[i * d..(i + 1) * d]);
            s.extend_from_slice(&self.class_scores.data()[i * c..(i + 1) * c]);
        }
        DetectorOutput {
            queries: Tensor::new(vec![idx.len(), d], q).unwrap(),
            class_scores: Tensor::new(vec![idx.len(), c], s).unwrap(),
            boxes: idx.iter().map(|&i| self.boxes[i]).collect(),
            enc_levels: self.enc_levels.clone(),
            backbone_c1: self.backbone_c1.clone(),
            enc_layer_index: self.enc_layer_index,
            image_h: self.image_h,
            image_w: self.image_w,
            source_gt: idx.iter().map(|&i| self.source_gt[i]).collect(),
        }
    }
}

fn seeded_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl FrozenDetector {
    pub fn new(weights_seed: u64, cfg: DetectorConfig) -> Result<Self> {
        if cfg.d < 16 {
            return Err(Error::Config(format!("detector width {} is below 16", cfg.d)));
        }
        if cfg.num_classes == 0 {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        let d = cfg.d;
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let mut weights = Vec::new();
        weights.push(("c1.k".to_string(), seeded_tensor(&mut rng, vec![d, 3, 8, 8], 2.0 / (192f64).sqrt())));
        weights.push(("c1.b".to_string(), seeded_tensor(&mut rng, vec![d], 0.1)));
        for l in 1..=4 {
            // the stride-8 map depends on which encoder layer it is read from
            let mut lr = if l == 1 {
                ChaCha8Rng::seed_from_u64(weights_seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(cfg.enc_layer_index as u64 + 1)))
            } else {
                rng.clone()
            };
            let k = seeded_tensor(&mut lr, vec![d, d, 3, 3], 1.5 / ((9 * d) as f64).sqrt());
            let b = seeded_tensor(&mut lr, vec![d], 0.1);
            if l != 1 {
                rng = lr;
            }
            weights.push((format!("e{l}.k"), k));
            weights.push((format!("e{l}.b"), b));
        }
        let zdim = 4 + d + QUERY_NOISE_DIM;
        weights.push(("query.w".to_string(), seeded_tensor(&mut rng, vec![d, zdim], 1.0 / (zdim as f64).sqrt())));
        weights.push(("query.box_gain".to_string(), Tensor::full(vec![1], 4.0)));
        Ok(FrozenDetector {
            cfg,
            weights_seed,
            weights,
        })
    }

    fn weight(&self, name: &str) -> &Tensor {
        &self.weights.iter().find(|(n, _)| n == name).expect("known detector weight").1
    }

    pub fn weights(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.weights.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// SHA-256 over every weight, for the frozen-weights guarantee.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.weights {
            h.update(n.as_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `C_1` and `E_1..E_4` for an image.
    pub fn features(&self, image: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(64) || !s[2].is_multiple_of(64) || s[1] == 0 || s[2] == 0 {
            return Err(Error::InvalidSpec(format!("image shape {s:?}")));
        }
        let d = self.cfg.d;
        let centred: Vec<f64> = image.data().iter().map(|v| v - 0.5).collect();
        let g = ConvGeom {
            cin: 3,
            h: s[1],
            w: s[2],
            cout: d,
            kh: 8,
            kw: 8,
            stride: 4,
            pad: 2,
            depthwise: false,
        };
        let mut c1 = conv2d_forward(&centred, self.weight("c1.k").data(), Some(self.weight("c1.b").data()), &g);
        c1.iter_mut().for_each(|v| *v = v.tanh());
        let (mut h, mut w) = (g.out_h(), g.out_w());
        let c1 = Tensor::new(vec![d, h, w], c1)?;
        let mut levels = Vec::with_capacity(4);
        let mut prev = c1.data().to_vec();
        for l in 1..=4 {
            let g = ConvGeom {
                cin: d,
                h,
                w,
                cout: d,
                kh: 3,
                kw: 3,
                stride: 2,
                pad: 1,
                depthwise: false,
            };
            let mut e = conv2d_forward(&prev, self.weight(&format!("e{l}.k")).data(), Some(self.weight(&format!("e{l}.b")).data()), &g);
            e.iter_mut().for_each(|v| *v = v.tanh());
            h = g.out_h();
            w = g.out_w();
            prev = e.clone();
            levels.push(Tensor::new(vec![d, h, w], e)?);
        }
        Ok((c1, levels))
    }

    fn query_vector(&self, b: &Box, e1: &Tensor, img_h: usize, img_w: usize, noise: &[f64]) -> Vec<f64> {
        let d = self.cfg.d;
        let (eh, ew) = (e1.shape()[1], e1.shape()[2]);
        let gain = self.weight("query.box_gain").data()[0];
        let mut z = Vec::with_capacity(4 + d + QUERY_NOISE_DIM);
        z.push(gain * ((b.x0 + b.x1) / 2.0 / img_w as f64 - 0.5));
        z.push(gain * ((b.y0 + b.y1) / 2.0 / img_h as f64 - 0.5));
        z.push(gain * (b.width() / img_w as f64 - 0.25));
        z.push(gain * (b.height() / img_h as f64 - 0.25));
        // mean of the stride-8 cells whose centres fall in the box
        let sx = ew as f64 / img_w as f64;
        let sy = eh as f64 / img_h as f64;
        let mut cells = Vec::new();
        for y in 0..eh {
            for x in 0..ew {
                let (px, py) = ((x as f64 + 0.5) / sx, (y as f64 + 0.5) / sy);
                if px >= b.x0 && px <= b.x1 && py >= b.y0 && py <= b.y1 {
                    cells.push(y * ew + x);
                }
            }
        }
        if cells.is_empty() {
            let x = (((b.x0 + b.x1) / 2.0 * sx) as usize).min(ew - 1);
            let y = (((b.y0 + b.y1) / 2.0 * sy) as usize).min(eh - 1);
            cells.push(y * ew + x);
        }
        for c in 0..d {
            let plane = &e1.data()[c * eh * ew..(c + 1) * eh * ew];
            z.push(cells.iter().map(|&i| plane[i]).sum::<f64>() / cells.len() as f64);
        }
        z.extend_from_slice(noise);
        let wq = self.weight("query.w");
        let zdim = z.len();
        (0..d)
            .map(|i| wq.data()[i * zdim..(i + 1) * zdim].iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Runs the stub on a scene. Positive queries come from jittered
    /// ground-truth boxes; the rest are low-scoring random distractors.
    pub fn run(&self, scene: &SyntheticScene) -> Result<DetectorOutput> {
        let k = scene.len();
        let nq = self.cfg.n_queries;
        if nq < k {
            return Err(Error::TooFewQueries { queries: nq, instances: k });
        }
        let (h, w) = (scene.height(), scene.width());
        let (c1, levels) = self.features(&scene.image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(scene.key() ^ self.weights_seed.rotate_left(17));
        let nc = self.cfg.num_classes;
        let mut slots: Vec<usize> = (0..nq).collect();
        slots.shuffle(&mut rng);

        let mut boxes = vec![Box::new(0.0, 0.0, 1.0, 1.0); nq];
        let mut scores = vec![0.0; nq * nc];
        let mut source = vec![None; nq];
        let noise = self.cfg.box_noise;
        for (g, gt) in scene.boxes.iter().enumerate() {
            let slot = slots[g];
            let (bw, bh) = (gt.width(), gt.height());
            let mut j = |ext: f64| if noise > 0.0 { rng.random_range(-noise..=noise) * ext } else { 0.0 };
            let b = Box::new(gt.x0 + j(bw), gt.y0 + j(bh), gt.x1 + j(bw), gt.y1 + j(bh)).clamped(w as f64, h as f64);
            boxes[slot] = b;
            source[slot] = Some(g);
            let label = scene.labels[g] % nc;
            for c in 0..nc {
                scores[slot * nc + c] = if c == label {
                    rng.random_range(0.75..0.95)
                } else {
                    rng.random_range(0.01..0.2)
                };
            }
        }
        for &slot in &slots[k..] {
            let bw = rng.random_range(0.1..0.5) * w as f64;
            let bh = rng.random_range(0.1..0.5) * h as f64;
            let x0 = rng.random_range(0.0..w as f64 - bw);
            let y0 = rng.random_range(0.0..h as f64 - bh);
            boxes[slot] = Box::new(x0, y0, x0 + bw, y0 + bh);
            let top = rng.random_range(0.05..0.3);
            let best = rng.random_range(0..nc);
            for c in 0..nc {
                scores[slot * nc + c] = if c == best { top } else { rng.random_range(0.01..top) };
            }
        }
        let d = self.cfg.d;
        let mut queries = Vec::with_capacity(nq * d);
        for b in &boxes {
            let noise: Vec<f64> = (0..QUERY_NOISE_DIM)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.1 * z
                })
                .collect();
            queries.extend(self.query_vector(b, &levels[0], h, w, &noise));
        }
        Ok(DetectorOutput {
            queries: Tensor::new(vec![nq, d], queries)?,
            class_scores: Tensor::new(vec![nq, nc], scores)?,
            boxes,
            enc_levels: levels,
            backbone_c1: c1,
            enc_layer_index: self.cfg.enc_layer_index,
            image_h: h,
            image_w: w,
            source_gt: source,
        })
    }
}

// ------------------------------------------------------------------- dataset

pub const MANIFEST: &str = "manifest.txt";

pub fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:05}")
}

pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::save(dir.join("image.mfdt"), &scene.image, DType::F32)?;
    io::save(dir.join("masks.mfdt"), &scene.masks, DType::U8)?;
    let b: Vec<f64> = scene.boxes.iter().flat_map(|b| b.to_array()).collect();
    io::save(dir.join("boxes.mfdt"), &Tensor::new(vec![scene.len(), 4], b)?, DType::F64)?;
    let l: Vec<f64> = scene.labels.iter().map(|&l| l as f64).collect();
    io::save(dir.join("labels.mfdt"), &Tensor::new(vec![scene.len()], l)?, DType::U8)?;
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<SyntheticScene> {
    let image = io::load(dir.join("image.mfdt"))?;
    let masks = io::load(dir.join("masks.mfdt"))?;
    let boxes = io::load(dir.join("boxes.mfdt"))?;
    let labels = io::load(dir.join("labels.mfdt"))?;
    let k = labels.numel();
    let ok = image.rank() == 3
        && image.shape()[0] == 3
        && masks.shape() == [k, image.shape()[1], image.shape()[2]]
        && boxes.shape() == [k, 4];
    if !ok {
        return Err(Error::Format(format!("inconsistent scene in {}", dir.display())));
    }
    Ok(SyntheticScene {
        image,
        masks,
        boxes: boxes.data().chunks_exact(4).map(|c| Box::new(c[0], c[1], c[2], c[3])).collect(),
        labels: labels.data().iter().map(|&l| l as usize).collect(),
    })
}

/// Writes scenes `seed, seed+1, ..` as a dataset directory with manifest.
pub fn write_dataset(out: &Path, seed: u64, count: usize, spec: &SceneSpec) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    let mut manifest = String::new();
    let mut dirs = Vec::with_capacity(count);
    for i in 0..count {
        let scene = gen_scene(seed.wrapping_add(i as u64), spec)?;
        let name = scene_dir_name(i);
        write_scene(&out.join(&name), &scene)?;
        manifest.push_str(&name);
        manifest.push('\n');
        dirs.push(out.join(name));
    }
    fs::write(out.join(MANIFEST), manifest)?;
    Ok(dirs)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| read_scene(&dir.join(l)))
        .collect()
}

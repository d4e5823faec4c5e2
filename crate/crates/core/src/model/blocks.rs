//! Trainable building blocks. Every block holds [`ParamId`]s into the
//! model's store and records its forward pass onto a [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{AttentionLayout, DeformLevel, ParamId, ParamStore, Tape, Tensor, VarId};

pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a dotted prefix.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_>) -> Result<T>) -> Result<T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.register(full, t)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.tensor(name, Tensor::new(shape, data)?)
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        self.scope(name, |b| {
            Ok(Linear {
                w: b.uniform("w", vec![din, dout], bound)?,
                b: b.tensor("b", Tensor::zeros(vec![dout]))?,
            })
        })
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        self.scope(name, |b| {
            Ok(Norm {
                g: b.tensor("g", Tensor::full(vec![d], 1.0))?,
                b: b.tensor("b", Tensor::zeros(vec![d]))?,
            })
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: VarId) -> Result<VarId> {
        let (w, b) = (t.param(s, self.w), t.param(s, self.b));
        t.affine(x, w, b)
    }

    pub fn count(din: usize, dout: usize) -> usize {
        din * dout + dout
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: VarId) -> Result<VarId> {
        let (g, b) = (t.param(s, self.g), t.param(s, self.b));
        t.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub(crate) fn build(b: &mut Builder<'_>, d: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: b.linear("fc1", d, hidden)?,
            fc2: b.linear("fc2", hidden, d)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: VarId) -> Result<VarId> {
        let h = self.fc1.forward(t, s, x)?;
        let h = t.gelu(h);
        self.fc2.forward(t, s, h)
    }

    pub fn count(d: usize, hidden: usize) -> usize {
        Linear::count(d, hidden) + Linear::count(hidden, d)
    }
}

/// Sine/cosine encoding of cell centres on an `h x w` grid, `[h*w, d]`.
/// The first half of the channels encodes y, the second half x.
pub fn sine_position(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    let freq = |k: usize| 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64 * std::f64::consts::TAU;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
            let row = &mut out[(i * w + j) * d..(i * w + j + 1) * d];
            for k in 0..half / 2 {
                let (fy, fx) = (y * freq(k), x * freq(k));
                row[2 * k] = fy.sin();
                row[2 * k + 1] = fy.cos();
                row[half + 2 * k] = fx.sin();
                row[half + 2 * k + 1] = fx.cos();
            }
        }
    }
    out
}

/// `[C, H, W]` map to `[H*W, C]` tokens.
pub fn map_to_tokens(t: &mut Tape, x: VarId) -> Result<VarId> {
    let s = t.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err("map_to_tokens", format!("{s:?}")));
    }
    let flat = t.reshape(x, vec![s[0], s[1] * s[2]])?;
    t.transpose(flat)
}

/// `[H*W, C]` tokens back to a `[C, H, W]` map.
pub fn tokens_to_map(t: &mut Tape, x: VarId, h: usize, w: usize) -> Result<VarId> {
    let c = t.shape(x)[1];
    let tr = t.transpose(x)?;
    t.reshape(tr, vec![c, h, w])
}

// ------------------------------------------------------------- deformable

/// Post-norm multi-scale deformable attention layer followed by an FFN.
#[derive(Debug, Clone)]
pub struct DeformableBlock {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: Norm,
    pub ffn: Mlp,
    pub norm2: Norm,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformableBlock {
    pub(crate) fn build(b: &mut Builder<'_>, d: usize, heads: usize, levels: usize, points: usize, ratio: usize) -> Result<Self> {
        let n_s = heads * levels * points;
        // Offsets start at zero weight with a bias fanning each head out in
        // its own direction, `p + 1` pixels for point `p`.
        let offsets = b.scope("offsets", |b| {
            let w = b.tensor("w", Tensor::zeros(vec![d, n_s * 2]))?;
            let mut bias = vec![0.0; n_s * 2];
            for h in 0..heads {
                let theta = std::f64::consts::TAU * h as f64 / heads as f64;
                let (c, s) = (theta.cos(), theta.sin());
                let m = c.abs().max(s.abs());
                for l in 0..levels {
                    for p in 0..points {
                        let i = (h * levels + l) * points + p;
                        bias[i * 2] = c / m * (p + 1) as f64;
                        bias[i * 2 + 1] = s / m * (p + 1) as f64;
                    }
                }
            }
            let bb = b.tensor("b", Tensor::new(vec![n_s * 2], bias)?)?;
            Ok(Linear { w, b: bb })
        })?;
        let weights = b.scope("weights", |b| {
            Ok(Linear {
                w: b.tensor("w", Tensor::zeros(vec![d, n_s]))?,
                b: b.tensor("b", Tensor::zeros(vec![n_s]))?,
            })
        })?;
        Ok(DeformableBlock {
            offsets,
            weights,
            value: b.linear("value", d, d)?,
            out: b.linear("out", d, d)?,
            norm1: b.norm("norm1", d)?,
            ffn: b.scope("ffn", |b| Mlp::build(b, d, d * ratio))?,
            norm2: b.norm("norm2", d)?,
            heads,
            levels,
            points,
        })
    }

    pub fn count(d: usize, heads: usize, levels: usize, points: usize, ratio: usize) -> usize {
        let n_s = heads * levels * points;
        Linear::count(d, n_s * 2) + Linear::count(d, n_s) + 2 * Linear::count(d, d) + 4 * d + Mlp::count(d, d * ratio)
    }

    /// `x: [N, d]`, `pos: [N, d]`, `refs` normalised `(x, y)` per token.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: VarId, pos: VarId, refs: &[f64], levels: &[DeformLevel]) -> Result<VarId> {
        let n = t.shape(x)[0];
        let q = t.add(x, pos)?;
        let off = self.offsets.forward(t, s, q)?;
        let logits = self.weights.forward(t, s, q)?;
        let per_head = self.levels * self.points;
        let logits = t.reshape(logits, vec![n * self.heads, per_head])?;
        let aw = t.softmax(logits, 1)?;
        let aw = t.reshape(aw, vec![n, self.heads * per_head])?;
        let v = self.value.forward(t, s, x)?;
        let sampled = t.ms_deform_attn(v, off, aw, refs.to_vec(), levels.to_vec(), self.heads, self.points)?;
        let o = self.out.forward(t, s, sampled)?;
        let x = t.add(x, o)?;
        let x = self.norm1.forward(t, s, x)?;
        let f = self.ffn.forward(t, s, x)?;
        let x = t.add(x, f)?;
        self.norm2.forward(t, s, x)
    }
}

/// Constant positional input for deformable layers over stacked levels.
pub struct DeformContext {
    pub levels: Vec<DeformLevel>,
    pub refs: Vec<f64>,
    pub pos: Vec<f64>,
}

impl DeformContext {
    pub fn new(sizes: &[(usize, usize)], d: usize) -> Self {
        let mut levels = Vec::new();
        let mut refs = Vec::new();
        let mut pos = Vec::new();
        let mut start = 0;
        for &(h, w) in sizes {
            levels.push(DeformLevel { h, w, start });
            for i in 0..h {
                for j in 0..w {
                    refs.push((j as f64 + 0.5) / w as f64);
                    refs.push((i as f64 + 0.5) / h as f64);
                }
            }
            pos.extend(sine_position(h, w, d));
            start += h * w;
        }
        DeformContext { levels, refs, pos }
    }

    pub fn tokens(&self) -> usize {
        self.refs.len() / 2
    }
}

// ----------------------------------------------------------------- window

/// Pre-norm window attention with a relative position bias, optionally on
/// a cyclically shifted grid.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub table: ParamId,
    pub norm2: Norm,
    pub mlp: Mlp,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
}

/// Token bookkeeping for one window partition of an `h x w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    pub window: usize,
    pub windows: usize,
    /// Source token for each windowed row, `None` for padding.
    pub gather: Vec<Option<usize>>,
    /// Windowed row for each source token.
    pub scatter: Vec<Option<usize>>,
    pub allowed: Vec<bool>,
    pub bias_index: Vec<usize>,
}

impl WindowPlan {
    pub fn new(h: usize, w: usize, window: usize, shifted: bool) -> Self {
        let ws = window.min(h.min(w));
        let shift = if shifted && h > ws && w > ws { ws / 2 } else { 0 };
        let hp = h.div_ceil(ws) * ws;
        let wp = w.div_ceil(ws) * ws;
        let (nwh, nww) = (hp / ws, wp / ws);
        let windows = nwh * nww;
        let per = ws * ws;
        let mut gather = vec![None; windows * per];
        let mut scatter = vec![None; h * w];
        let mut region = vec![0usize; windows * per];
        let band = |r: usize, n: usize| {
            if shift == 0 || r < n - ws {
                0
            } else if r < n - shift {
                1
            } else {
                2
            }
        };
        for r in 0..hp {
            for c in 0..wp {
                let row = ((r / ws) * nww + c / ws) * per + (r % ws) * ws + c % ws;
                let (sr, sc) = ((r + shift) % hp, (c + shift) % wp);
                if sr < h && sc < w {
                    gather[row] = Some(sr * w + sc);
                    scatter[sr * w + sc] = Some(row);
                }
                region[row] = band(r, hp) * 3 + band(c, wp);
            }
        }
        let mut allowed = vec![false; windows * per * per];
        for b in 0..windows {
            for i in 0..per {
                for j in 0..per {
                    let (ri, rj) = (b * per + i, b * per + j);
                    allowed[ri * per + j] = gather[rj].is_some() && region[ri] == region[rj];
                }
            }
        }
        let span = 2 * window - 1;
        let mut bias_index = vec![0; per * per];
        for i in 0..per {
            for j in 0..per {
                let dr = (i / ws) as isize - (j / ws) as isize + window as isize - 1;
                let dc = (i % ws) as isize - (j % ws) as isize + window as isize - 1;
                bias_index[i * per + j] = dr as usize * span + dc as usize;
            }
        }
        WindowPlan {
            window: ws,
            windows,
            gather,
            scatter,
            allowed,
            bias_index,
        }
    }
}

impl WindowBlock {
    pub(crate) fn build(b: &mut Builder<'_>, d: usize, heads: usize, window: usize, shifted: bool, ratio: usize) -> Result<Self> {
        let span = 2 * window - 1;
        Ok(WindowBlock {
            norm1: b.norm("norm1", d)?,
            q: b.linear("q", d, d)?,
            k: b.linear("k", d, d)?,
            v: b.linear("v", d, d)?,
            proj: b.linear("proj", d, d)?,
            table: b.uniform("rel_bias", vec![span * span, heads], 0.02)?,
            norm2: b.norm("norm2", d)?,
            mlp: b.scope("mlp", |b| Mlp::build(b, d, d * ratio))?,
            heads,
            window,
            shifted,
        })
    }

    pub fn count(d: usize, heads: usize, window: usize, ratio: usize) -> usize {
        let span = 2 * window - 1;
        4 * Linear::count(d, d) + span * span * heads + 4 * d + Mlp::count(d, d * ratio)
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: VarId, h: usize, w: usize) -> Result<VarId> {
        let plan = WindowPlan::new(h, w, self.window, self.shifted);
        let per = plan.window * plan.window;
        let n = self.norm1.forward(t, s, x)?;
        let win = t.gather_rows(n, plan.gather.clone())?;
        let q = self.q.forward(t, s, win)?;
        let k = self.k.forward(t, s, win)?;
        let v = self.v.forward(t, s, win)?;
        let span = 2 * self.window - 1;
        let table = t.param(s, self.table);
        // A clipped window uses the centre of the full-size table.
        let bias_index = if plan.window == self.window {
            plan.bias_index.clone()
        } else {
            let ws = plan.window;
            let mut idx = vec![0; per * per];
            for i in 0..per {
                for j in 0..per {
                    let dr = (i / ws) as isize - (j / ws) as isize + self.window as isize - 1;
                    let dc = (i % ws) as isize - (j % ws) as isize + self.window as isize - 1;
                    idx[i * per + j] = dr as usize * span + dc as usize;
                }
            }
            idx
        };
        let layout = AttentionLayout {
            heads: self.heads,
            blocks: plan.windows,
            q_len: per,
            k_len: per,
            allowed: Some(plan.allowed),
            bias_index: Some(bias_index),
        };
        let a = t.attention(q, k, v, Some(table), layout)?;
        let a = self.proj.forward(t, s, a)?;
        let back = t.gather_rows(a, plan.scatter)?;
        let x = t.add(x, back)?;
        let n2 = self.norm2.forward(t, s, x)?;
        let m = self.mlp.forward(t, s, n2)?;
        t.add(x, m)
    }
}

// --------------------------------------------------------------- convnext

/// Depthwise 7x7 convolution, layer norm and a pointwise MLP, residual.
#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    pub dw_k: ParamId,
    pub dw_b: ParamId,
    pub norm: Norm,
    pub mlp: Mlp,
}

impl ConvNextBlock {
    pub(crate) fn build(b: &mut Builder<'_>, d: usize, ratio: usize) -> Result<Self> {
        let bound = (6.0 / 98.0f64).sqrt();
        Ok(ConvNextBlock {
            dw_k: b.uniform("dw.k", vec![d, 1, 7, 7], bound)?,
            dw_b: b.tensor("dw.b", Tensor::zeros(vec![d]))?,
            norm: b.norm("norm", d)?,
            mlp: b.scope("mlp", |b| Mlp::build(b, d, d * ratio))?,
        })
    }

    pub fn count(d: usize, ratio: usize) -> usize {
        49 * d + d + 2 * d + Mlp::count(d, d * ratio)
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: VarId, h: usize, w: usize) -> Result<VarId> {
        let map = tokens_to_map(t, x, h, w)?;
        let (k, b) = (t.param(s, self.dw_k), t.param(s, self.dw_b));
        let c = t.conv2d(map, k, Some(b), 1, 3, true)?;
        let c = map_to_tokens(t, c)?;
        let n = self.norm.forward(t, s, c)?;
        let m = self.mlp.forward(t, s, n)?;
        t.add(x, m)
    }
}

// -------------------------------------------------------------- attention

/// Pre-norm residual multi-head attention from queries onto a key set.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub(crate) fn build(b: &mut Builder<'_>, d: usize, heads: usize) -> Result<Self> {
        Ok(CrossAttention {
            norm: b.norm("norm", d)?,
            q: b.linear("q", d, d)?,
            k: b.linear("k", d, d)?,
            v: b.linear("v", d, d)?,
            out: b.linear("out", d, d)?,
            heads,
        })
    }

    pub fn count(d: usize) -> usize {
        2 * d + 4 * Linear::count(d, d)
    }

    /// `x: [n, d]`. With `memory = None` the queries attend to each other;
    /// otherwise keys are `memory + key_pos` and values `memory`.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: VarId, memory: Option<(VarId, VarId)>) -> Result<VarId> {
        let h = self.norm.forward(t, s, x)?;
        let q = self.q.forward(t, s, h)?;
        let (k, v) = match memory {
            None => (self.k.forward(t, s, h)?, self.v.forward(t, s, h)?),
            Some((m, pos)) => {
                let kin = t.add(m, pos)?;
                (self.k.forward(t, s, kin)?, self.v.forward(t, s, m)?)
            }
        };
        let layout = AttentionLayout::dense(self.heads, t.shape(q)[0], t.shape(k)[0]);
        let a = t.attention(q, k, v, None, layout)?;
        let o = self.out.forward(t, s, a)?;
        t.add(x, o)
    }
}

/// Pre-norm residual MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: Norm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub(crate) fn build(b: &mut Builder<'_>, d: usize, ratio: usize) -> Result<Self> {
        Ok(FeedForward {
            norm: b.norm("norm", d)?,
            mlp: Mlp::build(b, d, d * ratio)?,
        })
    }

    pub fn count(d: usize, ratio: usize) -> usize {
        2 * d + Mlp::count(d, d * ratio)
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: VarId) -> Result<VarId> {
        let h = self.norm.forward(t, s, x)?;
        let m = self.mlp.forward(t, s, h)?;
        t.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn block_counts_match_registration() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        b.scope("deform", |b| DeformableBlock::build(b, 256, 8, 4, 4, 4)).unwrap();
        assert_eq!(store.num_scalars(), 756_864);
        assert_eq!(DeformableBlock::count(256, 8, 4, 4, 4), 756_864);
        assert_eq!(WindowBlock::count(256, 8, 8, 4), 791_560);
        assert_eq!(ConvNextBlock::count(256, 4), 538_880);

        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, &mut rng);
        b.scope("w", |b| WindowBlock::build(b, 64, 4, 4, true, 4)).unwrap();
        assert_eq!(store.num_scalars(), WindowBlock::count(64, 4, 4, 4));
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, &mut rng);
        b.scope("c", |b| ConvNextBlock::build(b, 48, 4)).unwrap();
        assert_eq!(store.num_scalars(), ConvNextBlock::count(48, 4));
    }

    #[test]
    fn window_plan_unshifted_partition() {
        let p = WindowPlan::new(4, 4, 2, false);
        assert_eq!(p.windows, 4);
        // first window holds tokens (0,0),(0,1),(1,0),(1,1)
        assert_eq!(&p.gather[..4], &[Some(0), Some(1), Some(4), Some(5)]);
        assert!(p.allowed.iter().all(|&a| a));
        for (src, row) in p.scatter.iter().enumerate() {
            assert_eq!(p.gather[row.unwrap()], Some(src));
        }
    }

    #[test]
    fn window_plan_shift_and_padding() {
        let p = WindowPlan::new(4, 4, 2, true);
        // shifted by one: the first window starts at (1,1)
        assert_eq!(p.gather[0], Some(5));
        // the last window wraps around and mixes regions
        let last = &p.allowed[3 * 16..4 * 16];
        assert!(last.iter().any(|&a| !a));
        let p = WindowPlan::new(3, 5, 2, false);
        assert_eq!(p.windows, 2 * 3);
        assert_eq!(p.gather.iter().flatten().count(), 15);
        assert!(p.scatter.iter().all(|r| r.is_some()));
    }

    #[test]
    fn sine_position_layout() {
        let p = sine_position(2, 3, 8);
        assert_eq!(p.len(), 2 * 3 * 8);
        let y0 = 0.5 / 2.0 * std::f64::consts::TAU;
        assert!((p[0] - y0.sin()).abs() < 1e-15);
        assert!((p[1] - y0.cos()).abs() < 1e-15);
        let x1 = 1.5 / 3.0 * std::f64::consts::TAU;
        assert!((p[8 + 4] - x1.sin()).abs() < 1e-15);
    }
}

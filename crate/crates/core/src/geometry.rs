//! Box algebra, RoIAlign, mask pasting and uncertainty point sampling.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{bilinear_read, resize_bilinear};
use crate::tensor::{Tape, Tensor, VarId};

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Boxes below this area (px^2) are treated as empty.
pub const MIN_AREA: f64 = 1e-8;

impl Box {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Box { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Orders the corners so that `x0 <= x1` and `y0 <= y1`.
    pub fn normalized(&self) -> Box {
        Box {
            x0: self.x0.min(self.x1),
            y0: self.y0.min(self.y1),
            x1: self.x0.max(self.x1),
            y1: self.y0.max(self.y1),
        }
    }

    pub fn clamped(&self, w: f64, h: f64) -> Box {
        let b = self.normalized();
        Box {
            x0: b.x0.clamp(0.0, w),
            y0: b.y0.clamp(0.0, h),
            x1: b.x1.clamp(0.0, w),
            y1: b.y1.clamp(0.0, h),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() < MIN_AREA
    }

    /// Normalised and clamped to `[0,w] x [0,h]`, or `DegenerateBox`.
    pub fn checked(&self, w: f64, h: f64) -> Result<Box> {
        let b = self.clamped(w, h);
        if b.is_degenerate() {
            return Err(Error::DegenerateBox {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
            });
        }
        Ok(b)
    }

    pub fn scaled(&self, s: f64) -> Box {
        Box {
            x0: self.x0 * s,
            y0: self.y0 * s,
            x1: self.x1 * s,
            y1: self.y1 * s,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Integer pixel footprint `(x0, y0, x1, y1)`, rounded outward and
    /// clipped to a `w x h` image.
    pub fn footprint(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let fx0 = self.x0.floor().clamp(0.0, w as f64) as usize;
        let fy0 = self.y0.floor().clamp(0.0, h as f64) as usize;
        let fx1 = self.x1.ceil().clamp(0.0, w as f64) as usize;
        let fy1 = self.y1.ceil().clamp(0.0, h as f64) as usize;
        (fx0, fy0, fx1, fy1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxFormat {
    /// Centre and size, each divided by the image extent.
    CxcywhNorm,
    /// Corners in pixels.
    XyxyPx,
}

impl FromStr for BoxFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cxcywh_norm" => Ok(BoxFormat::CxcywhNorm),
            "xyxy_px" => Ok(BoxFormat::XyxyPx),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

impl fmt::Display for BoxFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxFormat::CxcywhNorm => "cxcywh_norm",
            BoxFormat::XyxyPx => "xyxy_px",
        })
    }
}

/// Converts four box coordinates between formats for an `h x w` image.
pub fn box_convert(v: [f64; 4], from: BoxFormat, to: BoxFormat, h: usize, w: usize) -> [f64; 4] {
    let (wf, hf) = (w as f64, h as f64);
    let xyxy = match from {
        BoxFormat::XyxyPx => v,
        BoxFormat::CxcywhNorm => {
            let [cx, cy, bw, bh] = v;
            [(cx - bw / 2.0) * wf, (cy - bh / 2.0) * hf, (cx + bw / 2.0) * wf, (cy + bh / 2.0) * hf]
        }
    };
    match to {
        BoxFormat::XyxyPx => xyxy,
        BoxFormat::CxcywhNorm => {
            let [x0, y0, x1, y1] = xyxy;
            [(x0 + x1) / 2.0 / wf, (y0 + y1) / 2.0 / hf, (x1 - x0) / wf, (y1 - y0) / hf]
        }
    }
}

/// String-tagged form of [`box_convert`].
pub fn box_convert_tagged(v: [f64; 4], from: &str, to: &str, h: usize, w: usize) -> Result<[f64; 4]> {
    Ok(box_convert(v, from.parse()?, to.parse()?, h, w))
}

pub fn box_iou(a: &Box, b: &Box) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Cell-centre sample positions of an `out_h x out_w` grid laid over `b`,
/// as interleaved `(x, y)`. Positions are clamped to the hull of the
/// `fh x fw` map's pixel centres, so reads near the border replicate the
/// edge instead of fading into the zero padding.
pub fn roi_points(b: &Box, out_h: usize, out_w: usize, fh: usize, fw: usize) -> Vec<f64> {
    let cw = b.width() / out_w as f64;
    let ch = b.height() / out_h as f64;
    let mut pts = Vec::with_capacity(out_h * out_w * 2);
    for i in 0..out_h {
        let y = (b.y0 + (i as f64 + 0.5) * ch).clamp(0.5, fh as f64 - 0.5);
        for j in 0..out_w {
            let x = (b.x0 + (j as f64 + 0.5) * cw).clamp(0.5, fw as f64 - 0.5);
            pts.push(x);
            pts.push(y);
        }
    }
    pts
}

/// RoIAlign with one bilinear sample per cell. `b` is at the scale of `f`
/// (`[C, Hf, Wf]`); the result is `[out_h * out_w, C]`, row-major over cells.
pub fn roi_align(tape: &mut Tape, f: VarId, b: &Box, out_h: usize, out_w: usize) -> Result<VarId> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(crate::error::shape_err("roi_align", format!("{s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidSize(out_h, out_w));
    }
    let b = b.checked(s[2] as f64, s[1] as f64)?;
    let pts = roi_points(&b, out_h, out_w, s[1], s[2]);
    let pts = tape.constant_from(vec![out_h * out_w, 2], pts)?;
    tape.bilinear_sample(f, pts)
}

/// Writes an `out_h x out_w` box-local map into an `h x w` zero canvas,
/// resized to the box's outward-rounded pixel footprint.
pub fn paste_mask(roi: &[f64], out_h: usize, out_w: usize, b: &Box, h: usize, w: usize) -> Result<Tensor> {
    if roi.len() != out_h * out_w || out_h == 0 || out_w == 0 {
        return Err(crate::error::shape_err("paste_mask", format!("{} values for {out_h}x{out_w}", roi.len())));
    }
    let b = b.checked(w as f64, h as f64)?;
    let (fx0, fy0, fx1, fy1) = b.footprint(w, h);
    let (fw, fh) = (fx1 - fx0, fy1 - fy0);
    let mut canvas = vec![0.0; h * w];
    let resized = resize_bilinear(roi, 1, out_h, out_w, fh, fw);
    for i in 0..fh {
        canvas[(fy0 + i) * w + fx0..(fy0 + i) * w + fx1].copy_from_slice(&resized[i * fw..(i + 1) * fw]);
    }
    Tensor::new(vec![h, w], canvas)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSampleConfig {
    pub n_points: usize,
    pub oversample: f64,
    pub importance_ratio: f64,
    pub seed: u64,
}

impl Default for PointSampleConfig {
    fn default() -> Self {
        PointSampleConfig {
            n_points: 1024,
            oversample: 3.0,
            importance_ratio: 0.75,
            seed: 0,
        }
    }
}

impl PointSampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 || self.oversample <= 1.0 || !(0.0..=1.0).contains(&self.importance_ratio) {
            return Err(Error::Config(format!(
                "point sampling needs N >= 1, k > 1, 0 <= beta <= 1 (got {}, {}, {})",
                self.n_points, self.oversample, self.importance_ratio
            )));
        }
        Ok(())
    }

    /// Number of points chosen by uncertainty, `floor(beta * N)`.
    pub fn n_important(&self) -> usize {
        (self.importance_ratio * self.n_points as f64).floor() as usize
    }

    pub fn n_candidates(&self) -> usize {
        (self.oversample * self.n_points as f64).ceil() as usize
    }
}

/// `-|p - 0.5|`, largest on the decision boundary.
pub fn uncertainty(p: f64) -> f64 {
    -(p - 0.5).abs()
}

/// Probability at a continuous position of an `h x w` map, edge-replicated.
pub fn read_clamped(map: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    bilinear_read(map, h, w, x.clamp(0.5, w as f64 - 0.5), y.clamp(0.5, h as f64 - 0.5))
}

/// Uncertainty-biased point sampling on an `h x w` probability map.
///
/// Candidates and the uniform remainder come from two independent streams
/// of the seed, so `beta = 0` yields exactly the uniform stream.
pub fn sample_points(probs: &[f64], h: usize, w: usize, cfg: &PointSampleConfig) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    if probs.len() != h * w || h == 0 || w == 0 {
        return Err(crate::error::shape_err("sample_points", format!("{} values for {h}x{w}", probs.len())));
    }
    let keep = cfg.n_important();
    let mut out = Vec::with_capacity(cfg.n_points);
    if keep > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let cands: Vec<[f64; 2]> = (0..cfg.n_candidates())
            .map(|_| [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)])
            .collect();
        let mut order: Vec<(f64, usize)> = cands
            .iter()
            .enumerate()
            .map(|(i, p)| (uncertainty(read_clamped(probs, h, w, p[0], p[1])), i))
            .collect();
        // most uncertain first, ties by draw order
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| cands[i]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    for _ in keep..cfg.n_points {
        out.push([rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = Box::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &Box::new(3.0, 3.0, 4.0, 4.0)), 0.0);
        let u = Box::new(0.0, 0.0, 1.0, 1.0);
        let v = Box::new(0.5, 0.0, 1.5, 1.0);
        assert!((box_iou(&u, &v) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn convert_examples() {
        let b = box_convert([0.5, 0.5, 1.0, 1.0], BoxFormat::CxcywhNorm, BoxFormat::XyxyPx, 64, 64);
        assert_eq!(b, [0.0, 0.0, 64.0, 64.0]);
        assert!(matches!(
            box_convert_tagged(b, "xyxy_px", "polar", 64, 64),
            Err(Error::UnknownFormat(_))
        ));
        let z = box_convert([0.2, 0.3, 0.0, 0.0], BoxFormat::CxcywhNorm, BoxFormat::XyxyPx, 32, 32);
        let zb = Box::new(z[0], z[1], z[2], z[3]);
        assert!(zb.is_degenerate());
        assert!(matches!(zb.checked(32.0, 32.0), Err(Error::DegenerateBox { .. })));
    }

    #[test]
    fn footprint_rounds_outward() {
        let b = Box::new(1.2, 0.0, 3.01, 2.5);
        assert_eq!(b.footprint(10, 10), (1, 0, 4, 3));
    }

    #[test]
    fn sample_points_validates() {
        let bad = PointSampleConfig {
            oversample: 1.0,
            ..Default::default()
        };
        assert!(sample_points(&[0.5; 4], 2, 2, &bad).is_err());
    }
}

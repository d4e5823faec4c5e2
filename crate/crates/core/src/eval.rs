//! Mask IoU and COCO-style mask average precision.

use std::fmt;

use crate::error::{shape_err, Result};

/// `|a ∩ b| / |a ∪ b|`, zero when the union is empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("mask_iou", format!("{} vs {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Pixels strictly above one half.
pub fn binarize(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p > 0.5).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub label: usize,
    pub score: f64,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtMask {
    pub label: usize,
    pub mask: Vec<bool>,
}

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalImage {
    pub preds: Vec<ScoredMask>,
    pub gts: Vec<GtMask>,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Half-open pixel-area ranges: all, small, medium, large.
pub const AREA_RANGES: [(f64, f64); 4] = [
    (0.0, f64::INFINITY),
    (0.0, 1024.0),
    (1024.0, 9216.0),
    (9216.0, f64::INFINITY),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub label: usize,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
}

/// Averages over classes with ground truth. `None` means undefined (no
/// ground truth in the bucket).
#[derive(Debug, Clone, PartialEq)]
pub struct APReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class: Vec<ClassAp>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.4}", x))
}

impl APReport {
    pub fn rows(&self) -> Vec<(String, Option<f64>)> {
        let mut rows = vec![
            ("AP".to_string(), self.ap),
            ("AP50".to_string(), self.ap50),
            ("AP75".to_string(), self.ap75),
            ("AP_S".to_string(), self.ap_small),
            ("AP_M".to_string(), self.ap_medium),
            ("AP_L".to_string(), self.ap_large),
        ];
        for c in &self.per_class {
            rows.push((format!("AP[class {}]", c.label), c.ap));
            rows.push((format!("AP50[class {}]", c.label), c.ap50));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            s.push_str(&format!("{k},{}\n", fmt_opt(v)));
        }
        s
    }
}

impl fmt::Display for APReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<width$}  {:>7}", fmt_opt(v))?;
        }
        Ok(())
    }
}

/// Detections of one class in one image against that image's ground truth.
struct ImageClass {
    /// `(score, area, ious against gts, global order key)`
    dets: Vec<(f64, f64, Vec<f64>, (usize, usize))>,
    gt_areas: Vec<f64>,
}

/// 101-point interpolated precision from score-sorted match flags.
pub fn interpolated_ap(matches: &[bool], n_gt: usize) -> f64 {
    let mut prec = Vec::with_capacity(matches.len());
    let mut rec = Vec::with_capacity(matches.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &m in matches {
        if m {
            tp += 1;
        } else {
            fp += 1;
        }
        prec.push(tp as f64 / (tp + fp) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (1..prec.len()).rev() {
        if prec[i] > prec[i - 1] {
            prec[i - 1] = prec[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = rec.partition_point(|&x| x < r);
        if idx < prec.len() {
            sum += prec[idx];
        }
    }
    sum / 101.0
}

/// AP of one class at one IoU threshold and area range.
fn class_ap(groups: &[ImageClass], thr: f64, (lo, hi): (f64, f64)) -> Option<f64> {
    let in_range = |a: f64| a >= lo && a < hi;
    let mut n_gt = 0;
    // (score, order key, matched)
    let mut flags: Vec<(f64, (usize, usize), bool)> = Vec::new();
    for g in groups {
        let ignore: Vec<bool> = g.gt_areas.iter().map(|&a| !in_range(a)).collect();
        n_gt += ignore.iter().filter(|&&i| !i).count();
        // non-ignored ground truth is preferred
        let mut gt_order: Vec<usize> = (0..g.gt_areas.len()).collect();
        gt_order.sort_by_key(|&i| (ignore[i], i));
        let mut taken = vec![false; g.gt_areas.len()];
        for (score, area, ious, key) in &g.dets {
            let mut best: Option<usize> = None;
            let mut best_iou = thr.min(1.0 - 1e-10);
            for &j in &gt_order {
                if taken[j] {
                    continue;
                }
                if let Some(b) = best {
                    if !ignore[b] && ignore[j] {
                        break;
                    }
                }
                if ious[j] < best_iou {
                    continue;
                }
                best_iou = ious[j];
                best = Some(j);
            }
            match best {
                Some(j) => {
                    taken[j] = true;
                    if !ignore[j] {
                        flags.push((*score, *key, true));
                    }
                }
                None => {
                    if in_range(*area) {
                        flags.push((*score, *key, false));
                    }
                }
            }
        }
    }
    if n_gt == 0 {
        return None;
    }
    flags.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let matches: Vec<bool> = flags.iter().map(|f| f.2).collect();
    Some(interpolated_ap(&matches, n_gt))
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// COCO-protocol mask AP over a split at IoU thresholds 0.50:0.05:0.95.
///
/// Per class, IoU threshold and area range, detections are matched image
/// by image in descending score order to the best unmatched ground truth
/// at or above the threshold, then pooled across images into one
/// precision/recall curve sampled at 101 recall points.
pub fn evaluate_ap(images: &[EvalImage], num_classes: usize) -> Result<APReport> {
    evaluate_ap_at(images, num_classes, &iou_thresholds())
}

/// [`evaluate_ap`] over an explicit threshold list. `ap50` and `ap75` are
/// `None` unless 0.5 and 0.75 are in the list.
pub fn evaluate_ap_at(images: &[EvalImage], num_classes: usize, thresholds: &[f64]) -> Result<APReport> {
    let pos = |x: f64| thresholds.iter().position(|&t| (t - x).abs() < 1e-9);
    let (i50, i75) = (pos(0.5), pos(0.75));
    let mut groups: Vec<Vec<ImageClass>> = (0..num_classes).map(|_| Vec::new()).collect();
    for (ii, img) in images.iter().enumerate() {
        for (c, group) in groups.iter_mut().enumerate() {
            let gts: Vec<&GtMask> = img.gts.iter().filter(|g| g.label == c).collect();
            let mut dets: Vec<(usize, &ScoredMask)> = img.preds.iter().enumerate().filter(|(_, p)| p.label == c).collect();
            if gts.is_empty() && dets.is_empty() {
                continue;
            }
            dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
            let mut entries = Vec::with_capacity(dets.len());
            for (di, d) in dets {
                let ious = gts.iter().map(|g| mask_iou(&d.mask, &g.mask)).collect::<Result<Vec<f64>>>()?;
                let area = d.mask.iter().filter(|&&b| b).count() as f64;
                entries.push((d.score, area, ious, (ii, di)));
            }
            group.push(ImageClass {
                dets: entries,
                gt_areas: gts.iter().map(|g| g.mask.iter().filter(|&&b| b).count() as f64).collect(),
            });
        }
    }
    let mut all = Vec::new();
    let mut at50 = Vec::new();
    let mut at75 = Vec::new();
    let mut buckets = vec![Vec::new(); 3];
    let mut per_class = Vec::new();
    for (c, g) in groups.iter().enumerate() {
        let mut class_all = Vec::new();
        let mut class50 = None;
        for (ti, &t) in thresholds.iter().enumerate() {
            if let Some(ap) = class_ap(g, t, AREA_RANGES[0]) {
                class_all.push(ap);
                all.push(ap);
                if Some(ti) == i50 {
                    at50.push(ap);
                    class50 = Some(ap);
                }
                if Some(ti) == i75 {
                    at75.push(ap);
                }
            }
            for (b, bucket) in buckets.iter_mut().enumerate() {
                if let Some(ap) = class_ap(g, t, AREA_RANGES[b + 1]) {
                    bucket.push(ap);
                }
            }
        }
        per_class.push(ClassAp {
            label: c,
            ap: mean(&class_all),
            ap50: class50,
        });
    }
    Ok(APReport {
        ap: mean(&all),
        ap50: mean(&at50),
        ap75: mean(&at75),
        ap_small: mean(&buckets[0]),
        ap_medium: mean(&buckets[1]),
        ap_large: mean(&buckets[2]),
        per_class,
    })
}


/// AP report plus the mean mask IoU of box-matched queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub report: APReport,
    pub mean_iou: f64,
    pub matched: usize,
    pub gt_instances: usize,
}

/// Runs the detector and head on every scene and scores the result.
pub fn evaluate_split(
    head: &crate::model::MaskHead,
    detector: &crate::synth::FrozenDetector,
    scenes: &[crate::synth::SyntheticScene],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<SplitSummary> {
    let mut images = Vec::with_capacity(scenes.len());
    let mut iou_sum = 0.0;
    let mut matched = 0;
    let mut gt_instances = 0;
    for scene in scenes {
        let det = detector.run(scene)?;
        let det = det.select_top_queries(head.cfg.n_queries.min(det.n_queries()))?;
        let preds = head.segment(&det)?;
        let gts: Vec<GtMask> = (0..scene.len())
            .map(|k| GtMask {
                label: scene.labels[k],
                mask: binarize(scene.mask(k)),
            })
            .collect();
        let a = crate::train::match_queries(&det.boxes, &scene.boxes, iou_threshold);
        for &(q, g) in &a.pairs {
            let p = preds.iter().find(|p| p.query == q).expect("one prediction per query");
            iou_sum += mask_iou(&p.binary(), &gts[g].mask)?;
            matched += 1;
        }
        gt_instances += scene.len();
        images.push(EvalImage {
            preds: preds
                .into_iter()
                .map(|p| ScoredMask {
                    label: p.label,
                    score: p.score,
                    mask: p.binary(),
                })
                .collect(),
            gts,
        });
    }
    Ok(SplitSummary {
        report: evaluate_ap(&images, num_classes)?,
        mean_iou: if matched == 0 { 0.0 } else { iou_sum / matched as f64 },
        matched,
        gt_instances,
    })
}

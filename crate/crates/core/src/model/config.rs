//! Architecture knobs and the flat `key = value` config format.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    None,
    Deformable,
    Window,
    ConvNext,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EncoderKind::None),
            "deformable" => Ok(EncoderKind::Deformable),
            "window" => Ok(EncoderKind::Window),
            "convnext" => Ok(EncoderKind::ConvNext),
            _ => Err(Error::Config(format!("unknown encoder kind `{s}`"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::None => "none",
            EncoderKind::Deformable => "deformable",
            EncoderKind::Window => "window",
            EncoderKind::ConvNext => "convnext",
        })
    }
}

/// Every architecture and ablation switch of the mask head.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHeadConfig {
    /// Detector channel width.
    pub d: usize,
    pub mapper: bool,
    pub d_mapper: usize,
    pub img_enc: EncoderKind,
    pub img_depth: usize,
    pub box_enc: EncoderKind,
    pub box_depth: usize,
    pub roi_h: usize,
    pub roi_w: usize,
    pub query_ffn: bool,
    pub query_o2o: bool,
    pub query_b2o: bool,
    pub query_heads: usize,
    pub neck: bool,
    pub neck_groups: usize,
    pub mask_scoring: bool,
    /// Multiply the mask-scoring factor by the mean-probability factor too.
    pub score_compose: bool,
    pub scoring_channels: usize,
    pub scoring_hidden: usize,
    pub deform_heads: usize,
    pub deform_levels: usize,
    pub deform_points: usize,
    pub ffn_ratio: usize,
    pub window_size: usize,
    pub window_heads: usize,
    pub enc_layer_index: usize,
    pub n_queries: usize,
    /// Predict masks from the whole fused map instead of per-box RoIs.
    pub full_image_path: bool,
}

impl Default for MaskHeadConfig {
    fn default() -> Self {
        MaskHeadConfig {
            d: 256,
            mapper: true,
            d_mapper: 128,
            img_enc: EncoderKind::Deformable,
            img_depth: 2,
            box_enc: EncoderKind::Deformable,
            box_depth: 2,
            roi_h: 32,
            roi_w: 32,
            query_ffn: true,
            query_o2o: false,
            query_b2o: true,
            query_heads: 8,
            neck: true,
            neck_groups: 32,
            mask_scoring: true,
            score_compose: false,
            scoring_channels: 64,
            scoring_hidden: 256,
            deform_heads: 8,
            deform_levels: 4,
            deform_points: 4,
            ffn_ratio: 4,
            window_size: 8,
            window_heads: 8,
            enc_layer_index: 4,
            n_queries: 100,
            full_image_path: false,
        }
    }
}

impl MaskHeadConfig {
    /// Defaults scaled to a detector of width `d`.
    pub fn for_width(d: usize) -> Self {
        MaskHeadConfig {
            d,
            d_mapper: d.min(128),
            ..Default::default()
        }
    }

    /// Everything trainable switched off.
    pub fn baseline(d: usize) -> Self {
        MaskHeadConfig {
            d,
            mapper: false,
            d_mapper: d,
            img_enc: EncoderKind::None,
            img_depth: 0,
            box_enc: EncoderKind::None,
            box_depth: 0,
            query_ffn: false,
            query_o2o: false,
            query_b2o: false,
            neck: false,
            mask_scoring: false,
            ..Default::default()
        }
    }

    /// Channel width of the fused map after the (optional) mapper.
    pub fn feat_dim(&self) -> usize {
        if self.mapper {
            self.d_mapper
        } else {
            self.d
        }
    }

    pub fn uses_box_features(&self) -> bool {
        !self.full_image_path
    }

    pub fn img_blocks(&self) -> usize {
        if self.img_enc == EncoderKind::None {
            0
        } else {
            self.img_depth
        }
    }

    pub fn box_blocks(&self) -> usize {
        if self.box_enc == EncoderKind::None || self.full_image_path {
            0
        } else {
            self.box_depth
        }
    }

    pub fn b2o_active(&self) -> bool {
        self.query_b2o && !self.full_image_path
    }

    /// Queries get a dedicated projection whenever any trainable query
    /// processing or the mapper is present.
    pub fn query_proj(&self) -> bool {
        self.mapper || self.query_ffn || self.query_o2o || self.b2o_active()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return err("d must be positive".into());
        }
        if self.mapper && (self.d_mapper == 0 || self.d_mapper > self.d) {
            return err(format!("d_mapper {} must lie in 1..=d ({})", self.d_mapper, self.d));
        }
        if self.roi_h < 4 || self.roi_w < 4 {
            return err(format!("roi size {}x{} below 4", self.roi_h, self.roi_w));
        }
        if self.neck && (self.neck_groups == 0 || !self.d.is_multiple_of(self.neck_groups)) {
            return Err(Error::InvalidGroups {
                channels: self.d,
                groups: self.neck_groups,
            });
        }
        let fd = self.feat_dim();
        for (kind, blocks, width, what) in [
            (self.img_enc, self.img_blocks(), self.d, "image encoder"),
            (self.box_enc, self.box_blocks(), fd, "box encoder"),
        ] {
            if blocks == 0 {
                continue;
            }
            match kind {
                EncoderKind::Deformable => {
                    if self.deform_heads == 0 || width % self.deform_heads != 0 {
                        return err(format!("{what}: width {width} not divisible by {} heads", self.deform_heads));
                    }
                    if self.deform_points == 0 || self.deform_levels == 0 {
                        return err(format!("{what}: deformable levels and points must be positive"));
                    }
                    if width % 4 != 0 {
                        return err(format!("{what}: width {width} must be a multiple of 4 for positional encoding"));
                    }
                }
                EncoderKind::Window => {
                    if self.window_heads == 0 || width % self.window_heads != 0 {
                        return err(format!("{what}: width {width} not divisible by {} heads", self.window_heads));
                    }
                    if self.window_size < 2 || !self.window_size.is_multiple_of(2) {
                        return err(format!("{what}: window size {} must be even", self.window_size));
                    }
                }
                EncoderKind::ConvNext | EncoderKind::None => {}
            }
            if self.ffn_ratio == 0 {
                return err("ffn_ratio must be positive".into());
            }
        }
        if self.img_blocks() > 0 && self.img_enc == EncoderKind::Deformable && self.deform_levels != 4 {
            return err("the image encoder reads exactly four pyramid levels".into());
        }
        let qd = self.query_dim();
        if (self.query_o2o || self.b2o_active()) && (self.query_heads == 0 || !qd.is_multiple_of(self.query_heads)) {
            return err(format!("query width {qd} not divisible by {} heads", self.query_heads));
        }
        if self.b2o_active() && !qd.is_multiple_of(4) {
            return err(format!("query width {qd} must be a multiple of 4 for positional encoding"));
        }
        if self.mask_scoring && (self.scoring_channels == 0 || self.scoring_hidden == 0) {
            return err("mask scoring widths must be positive".into());
        }
        if self.n_queries == 0 {
            return err("n_queries must be positive".into());
        }
        Ok(())
    }

    /// Width of query vectors after projection (or the raw width).
    pub fn query_dim(&self) -> usize {
        self.feat_dim()
    }

    /// `(key, value)` lines covering every field.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d", self.d.to_string()),
            ("mapper", self.mapper.to_string()),
            ("d_mapper", self.d_mapper.to_string()),
            ("img_enc", self.img_enc.to_string()),
            ("img_depth", self.img_depth.to_string()),
            ("box_enc", self.box_enc.to_string()),
            ("box_depth", self.box_depth.to_string()),
            ("roi_h", self.roi_h.to_string()),
            ("roi_w", self.roi_w.to_string()),
            ("query_ffn", self.query_ffn.to_string()),
            ("query_o2o", self.query_o2o.to_string()),
            ("query_b2o", self.query_b2o.to_string()),
            ("query_heads", self.query_heads.to_string()),
            ("neck", self.neck.to_string()),
            ("neck_groups", self.neck_groups.to_string()),
            ("mask_scoring", self.mask_scoring.to_string()),
            ("score_compose", self.score_compose.to_string()),
            ("scoring_channels", self.scoring_channels.to_string()),
            ("scoring_hidden", self.scoring_hidden.to_string()),
            ("deform_heads", self.deform_heads.to_string()),
            ("deform_levels", self.deform_levels.to_string()),
            ("deform_points", self.deform_points.to_string()),
            ("ffn_ratio", self.ffn_ratio.to_string()),
            ("window_size", self.window_size.to_string()),
            ("window_heads", self.window_heads.to_string()),
            ("enc_layer_index", self.enc_layer_index.to_string()),
            ("n_queries", self.n_queries.to_string()),
            ("full_image_path", self.full_image_path.to_string()),
        ]
    }

    /// Applies and removes every recognised key from `map`.
    pub fn apply(&mut self, map: &mut ConfigMap) -> Result<()> {
        map.take_into("d", &mut self.d)?;
        map.take_into("mapper", &mut self.mapper)?;
        map.take_into("d_mapper", &mut self.d_mapper)?;
        map.take_into("img_enc", &mut self.img_enc)?;
        map.take_into("img_depth", &mut self.img_depth)?;
        map.take_into("box_enc", &mut self.box_enc)?;
        map.take_into("box_depth", &mut self.box_depth)?;
        map.take_into("roi_h", &mut self.roi_h)?;
        map.take_into("roi_w", &mut self.roi_w)?;
        map.take_into("query_ffn", &mut self.query_ffn)?;
        map.take_into("query_o2o", &mut self.query_o2o)?;
        map.take_into("query_b2o", &mut self.query_b2o)?;
        map.take_into("query_heads", &mut self.query_heads)?;
        map.take_into("neck", &mut self.neck)?;
        map.take_into("neck_groups", &mut self.neck_groups)?;
        map.take_into("mask_scoring", &mut self.mask_scoring)?;
        map.take_into("score_compose", &mut self.score_compose)?;
        map.take_into("scoring_channels", &mut self.scoring_channels)?;
        map.take_into("scoring_hidden", &mut self.scoring_hidden)?;
        map.take_into("deform_heads", &mut self.deform_heads)?;
        map.take_into("deform_levels", &mut self.deform_levels)?;
        map.take_into("deform_points", &mut self.deform_points)?;
        map.take_into("ffn_ratio", &mut self.ffn_ratio)?;
        map.take_into("window_size", &mut self.window_size)?;
        map.take_into("window_heads", &mut self.window_heads)?;
        map.take_into("enc_layer_index", &mut self.enc_layer_index)?;
        map.take_into("n_queries", &mut self.n_queries)?;
        map.take_into("full_image_path", &mut self.full_image_path)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Like [`to_text`](Self::to_text) with a comment line above each key.
    pub fn documented_text(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| {
                let doc = KEY_DOCS.iter().find(|(n, _)| n == k).map_or("", |(_, d)| *d);
                format!("# {doc}\n{k} = {v}\n")
            })
            .collect()
    }
}

/// One line of documentation per configuration key.
pub const KEY_DOCS: [(&str, &str); 28] = [
    ("d", "detector feature width"),
    ("mapper", "apply the per-pixel channel mapper before RoIAlign"),
    ("d_mapper", "channel width after the mapper"),
    ("img_enc", "image encoder: none, deformable, window or convnext"),
    ("img_depth", "image encoder blocks"),
    ("box_enc", "box encoder: none, deformable, window or convnext"),
    ("box_depth", "box encoder blocks"),
    ("roi_h", "RoI grid rows"),
    ("roi_w", "RoI grid columns"),
    ("query_ffn", "feed-forward layer in the query encoder"),
    ("query_o2o", "self-attention between the queries of a scene"),
    ("query_b2o", "cross-attention from a query to its own box features"),
    ("query_heads", "attention heads in the query encoder"),
    ("neck", "1x1 conv plus group norm on the stride-4 map"),
    ("neck_groups", "group norm groups in the neck"),
    ("mask_scoring", "train and use the IoU prediction head"),
    ("score_compose", "multiply the predicted IoU by the mean foreground probability"),
    ("scoring_channels", "conv channels of the IoU head"),
    ("scoring_hidden", "hidden width of the IoU head MLP"),
    ("deform_heads", "deformable attention heads"),
    ("deform_levels", "feature levels read by deformable attention"),
    ("deform_points", "sampling points per head and level"),
    ("ffn_ratio", "encoder MLP expansion ratio"),
    ("window_size", "window side of window attention"),
    ("window_heads", "window attention heads"),
    ("enc_layer_index", "detector encoder layer whose maps are used"),
    ("n_queries", "highest-scoring detector queries segmented per image"),
    ("full_image_path", "predict masks on the whole stride-4 map instead of per box"),
];

/// Parsed `key = value` lines; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(ConfigMap { entries })
    }

    /// Later values win.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))?;
        }
        Ok(())
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

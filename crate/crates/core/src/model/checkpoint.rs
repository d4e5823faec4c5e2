//! Checkpoints: a text header (config and parameter table) followed by
//! the MFDT encodings of every parameter.

use std::fs;
use std::path::Path;

use super::{ConfigMap, MaskHead, MaskHeadConfig};
use crate::error::{shape_err, Error, Result};
use crate::tensor::io::{self, DType};

pub const CHECKPOINT_MAGIC: &str = "frozenseg-checkpoint v1";

pub fn save_checkpoint(path: impl AsRef<Path>, head: &MaskHead) -> Result<()> {
    save_checkpoint_with_meta(path, head, &[])
}

/// Also stores free-form `meta` pairs (values must not contain newlines).
pub fn save_checkpoint_with_meta(path: impl AsRef<Path>, head: &MaskHead, meta: &[(String, String)]) -> Result<()> {
    let mut header = format!("{CHECKPOINT_MAGIC}\n");
    let mut payload = Vec::new();
    for (k, v) in head.cfg.to_pairs() {
        header.push_str(&format!("config {k} = {v}\n"));
    }
    for (k, v) in meta {
        if k.contains(['\n', '=', '#']) || v.contains(['\n', '#']) {
            return Err(Error::Config(format!("meta entry `{k}` cannot be stored")));
        }
        header.push_str(&format!("meta {k} = {v}\n"));
    }
    for id in head.params.ids_by_name() {
        let p = head.params.get(id);
        let bytes = io::encode(&p.tensor, DType::F64)?;
        let shape: Vec<String> = p.tensor.shape().iter().map(|e| e.to_string()).collect();
        header.push_str(&format!(
            "param {} {} {} {} {}\n",
            p.name,
            DType::F64.name(),
            payload.len(),
            bytes.len(),
            shape.join("x")
        ));
        payload.extend(bytes);
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend(payload);
    fs::write(path, out)?;
    Ok(())
}

struct Entry {
    name: String,
    offset: usize,
    len: usize,
    shape: Vec<usize>,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MaskHead> {
    load_checkpoint_with_meta(path).map(|(head, _)| head)
}

pub fn load_checkpoint_with_meta(path: impl AsRef<Path>) -> Result<(MaskHead, ConfigMap)> {
    let bytes = fs::read(path)?;
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
    let header = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let payload = &bytes[end + marker.len()..];
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut cfg_text = String::new();
    let mut meta_text = String::new();
    let mut entries = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("config ") {
            cfg_text.push_str(rest);
            cfg_text.push('\n');
        } else if let Some(rest) = line.strip_prefix("meta ") {
            meta_text.push_str(rest);
            meta_text.push('\n');
        } else if let Some(rest) = line.strip_prefix("param ") {
            let f: Vec<&str> = rest.split(' ').collect();
            let bad = || Error::Format(format!("bad parameter line `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            DType::parse(f[1])?;
            let shape = if f[4].is_empty() {
                vec![]
            } else {
                f[4].split('x').map(|e| e.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?
            };
            entries.push(Entry {
                name: f[0].to_string(),
                offset: f[2].parse().map_err(|_| bad())?,
                len: f[3].parse().map_err(|_| bad())?,
                shape,
            });
        } else {
            return Err(Error::Format(format!("unexpected header line `{line}`")));
        }
    }
    let mut map = ConfigMap::parse(&cfg_text)?;
    let mut cfg = MaskHeadConfig::default();
    cfg.apply(&mut map)?;
    map.finish()?;
    let mut head = MaskHead::new(cfg, 0)?;
    if entries.len() != head.params.len() {
        return Err(shape_err(
            "load_checkpoint",
            format!("{} stored parameters, model has {}", entries.len(), head.params.len()),
        ));
    }
    for e in entries {
        let id = head
            .params
            .id_of(&e.name)
            .ok_or_else(|| shape_err("load_checkpoint", format!("unknown parameter `{}`", e.name)))?;
        let slice = payload
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| Error::Format(format!("payload of `{}` out of range", e.name)))?;
        let (t, _, used) = io::decode(slice)?;
        let expected = head.params.tensor(id).shape().to_vec();
        if used != e.len || t.shape() != e.shape.as_slice() || t.shape() != expected.as_slice() {
            return Err(shape_err(
                "load_checkpoint",
                format!("`{}`: stored {:?}, model expects {:?}", e.name, t.shape(), expected),
            ));
        }
        head.set_param(&e.name, t)?;
    }
    Ok((head, ConfigMap::parse(&meta_text)?))
}

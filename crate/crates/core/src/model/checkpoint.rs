//! Versioned little-endian binary checkpoints.
//!
//! ```text
//! magic    b"PSHIELD\0"
//! version  u32
//! config   class_count u32, n u32, point widths u32*n,
//!          m u32, classifier widths u32*m, discriminator_hidden u32
//! count    u32
//! tensor*  name_len u32, name utf-8, group u8, ndim u32, dims u32*ndim,
//!          values f64*numel
//! ```

use std::fs;
use std::path::Path;

use super::{Group, ModelBundle, ModelConfig, Param};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSHIELD\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(bundle: &ModelBundle) -> Vec<u8> {
    let cfg = bundle.config();
    let mut out = Vec::with_capacity(16 + bundle.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, cfg.class_count as u32);
    put_u32(&mut out, cfg.point_widths.len() as u32);
    cfg.point_widths.iter().for_each(|&w| put_u32(&mut out, w as u32));
    put_u32(&mut out, cfg.classifier_widths.len() as u32);
    cfg.classifier_widths.iter().for_each(|&w| put_u32(&mut out, w as u32));
    put_u32(&mut out, cfg.discriminator_hidden as u32);
    put_u32(&mut out, bundle.params().len() as u32);
    for p in bundle.params() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.group.tag());
        put_u32(&mut out, p.value.shape().len() as u32);
        p.value.shape().iter().for_each(|&d| put_u32(&mut out, d as u32));
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let class_count = r.u32("class_count")? as usize;
    let n = r.u32("point width count")? as usize;
    let point_widths = (0..n)
        .map(|_| r.u32("point width").map(|w| w as usize))
        .collect::<Result<_>>()?;
    let m = r.u32("classifier width count")? as usize;
    let classifier_widths = (0..m)
        .map(|_| r.u32("classifier width").map(|w| w as usize))
        .collect::<Result<_>>()?;
    let discriminator_hidden = r.u32("discriminator width")? as usize;
    let config = ModelConfig {
        class_count,
        point_widths,
        classifier_widths,
        discriminator_hidden,
    };
    let layout = ModelBundle::expected_layout(&config)
        .map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;

    let count = r.u32("tensor count")? as usize;
    if count != layout.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {count}",
            layout.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (name, group, shape) in layout {
        let len = r.u32("tensor name length")? as usize;
        let found = String::from_utf8(r.take(len, "tensor name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        if found != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name:?}, found {found:?}"
            )));
        }
        let tag = r.take(1, &name)?[0];
        if Group::from_tag(tag) != Some(group) {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?}: group tag {tag} does not match {group}"
            )));
        }
        let ndim = r.u32(&name)? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?}: shape {dims:?}, expected {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(shape, data)?;
        params.push(Param {
            grad: vec![0.0; numel],
            name,
            group,
            value,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(ModelBundle::from_parts(config, params))
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    fs::write(path, encode(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

//! `GNET` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GNET" | version: u32 | config_len: u64 | config: canonical JSON
//! then until EOF, one entry per tensor:
//!   name_len: u32 | name: UTF-8 | rank: u32 | dims: rank × u64 | data: numel × f64
//! ```
//!
//! Entries are the model parameters in registration order followed by the
//! fusion normalization running statistics (`fusion.normK.running_mean`,
//! `fusion.normK.running_var`).

use std::path::Path;

use super::config::ModelConfig;
use super::network::GuidanceModel;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"GNET";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes to JSON with object keys sorted, so equal configs produce
/// equal bytes.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| Error::Format(e.to_string()))
}

pub fn to_bytes(model: &GuidanceModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = canonical_json(model.config())?;
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for p in model.params().iter() {
        write_entry(&mut out, &p.name, &p.value);
    }
    for (i, stats) in model.norm_stats().iter().enumerate() {
        let c = stats.mean.len();
        write_entry(&mut out, &format!("fusion.norm{}.running_mean", i + 1), &Tensor::new(&[c], stats.mean.clone())?);
        write_entry(&mut out, &format!("fusion.norm{}.running_var", i + 1), &Tensor::new(&[c], stats.var.clone())?);
    }
    Ok(out)
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<GuidanceModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a GNET checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let config_len = r.u64("config length")? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(config_len, "config")?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = GuidanceModel::new(config, 0).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

    let mut seen = vec![false; model.params().len()];
    let mut stats_seen = vec![[false; 2]; model.norm_stats().len()];
    while !r.done() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?, "tensor data")?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(&dims, data)?;

        if let Some(idx) = model.params().find(&name) {
            let slot = model.params_mut().iter_mut().nth(idx).unwrap();
            if slot.value.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = tensor;
            seen[idx] = true;
        } else if let Some((layer, field)) = parse_stats_name(&name) {
            let stats = model
                .norm_stats_mut()
                .get_mut(layer)
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
            let dst = if field == 0 { &mut stats.mean } else { &mut stats.var };
            if dst.len() != tensor.len() || tensor.rank() != 1 {
                return Err(Error::Format(format!("tensor `{name}` has wrong length")));
            }
            *dst = tensor.into_data();
            stats_seen[layer][field] = true;
        } else {
            return Err(Error::Format(format!("unexpected tensor `{name}`")));
        }
    }
    if let Some(idx) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("checkpoint lacks tensor `{}`", model.params().get(idx).name)));
    }
    if stats_seen.iter().flatten().any(|s| !s) {
        return Err(Error::Format("checkpoint lacks normalization statistics".into()));
    }
    Ok(model)
}

fn parse_stats_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("fusion.norm")?;
    let (layer, field) = rest.split_once('.')?;
    let layer: usize = layer.parse().ok()?;
    let field = match field {
        "running_mean" => 0,
        "running_var" => 1,
        _ => return None,
    };
    layer.checked_sub(1).map(|l| (l, field))
}

pub fn save(model: &GuidanceModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<GuidanceModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

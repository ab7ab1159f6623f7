//! Single-file checkpoint container.
//!
//! ```text
//! magic        4 bytes  "GLCK"
//! version      u16 LE   1
//! config_len   u32 LE   byte length of the config text
//! config       UTF-8    ModelConfig as key=value lines
//! count        u32 LE   number of tensors
//! per tensor:
//!   name_len   u16 LE
//!   name       UTF-8
//!   rank       u8
//!   dims       rank x u32 LE
//!   values     product(dims) x f64 LE, row-major
//! ```
//!
//! Batch-norm running statistics are stored as ordinary tensors named
//! `video.bn.running_mean`, `video.bn.running_var`, `text.bn.running_mean`,
//! and `text.bn.running_var`.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, Translator};
use crate::kv::KvMap;
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"GLCK";
const VERSION: u16 = 1;

const STAT_NAMES: [&str; 4] = [
    "video.bn.running_mean",
    "video.bn.running_var",
    "text.bn.running_mean",
    "text.bn.running_var",
];

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(model: &Translator, mut out: W) -> Result<(), ModelError> {
    let config = model.config().to_kv();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(config.as_bytes())?;
    let stats = [
        &model.norms.video.mean,
        &model.norms.video.var,
        &model.norms.text.mean,
        &model.norms.text.var,
    ];
    let count = model.params.len() + stats.len();
    out.write_all(&(count as u32).to_le_bytes())?;
    let mut put = |name: &str, shape: &[usize], values: &[f64]| -> Result<(), ModelError> {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[shape.len() as u8])?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    };
    for id in model.params.ids() {
        let t = model.params.get(id);
        put(model.params.name(id), t.shape(), t.data())?;
    }
    for (name, values) in STAT_NAMES.iter().zip(stats) {
        put(name, &[values.len()], values)?;
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], ModelError> {
    if buf.len() < n {
        return Err(bad(format!("truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn u16_le(buf: &mut &[u8], what: &str) -> Result<u16, ModelError> {
    Ok(u16::from_le_bytes(take(buf, 2, what)?.try_into().unwrap()))
}

fn u32_le(buf: &mut &[u8], what: &str) -> Result<u32, ModelError> {
    Ok(u32::from_le_bytes(take(buf, 4, what)?.try_into().unwrap()))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Translator, ModelError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 4, "magic")? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16_le(&mut buf, "version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config_len = u32_le(&mut buf, "config length")? as usize;
    let config_text = std::str::from_utf8(take(&mut buf, config_len, "config")?)
        .map_err(|_| bad("config is not UTF-8"))?;
    let mut config = ModelConfig::default();
    let map = KvMap::parse(config_text).map_err(|e| bad(e.to_string()))?;
    config.apply(&map).map_err(|e| bad(e.to_string()))?;
    let mut model = Translator::zeroed(config)?;
    let count = u32_le(&mut buf, "tensor count")? as usize;
    let mut seen = vec![false; model.params.len()];
    for _ in 0..count {
        let name_len = u16_le(&mut buf, "name length")? as usize;
        let name = std::str::from_utf8(take(&mut buf, name_len, "name")?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = take(&mut buf, 1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| u32_le(&mut buf, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = take(&mut buf, n * 8, &name)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = STAT_NAMES.iter().position(|s| *s == name) {
            let slot = match pos {
                0 => &mut model.norms.video.mean,
                1 => &mut model.norms.video.var,
                2 => &mut model.norms.text.mean,
                _ => &mut model.norms.text.var,
            };
            if slot.len() != values.len() {
                return Err(bad(format!("{name}: expected {} values", slot.len())));
            }
            *slot = values;
            continue;
        }
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| bad(format!("unknown tensor {name:?}")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(bad(format!(
                "{name}: shape {shape:?}, expected {:?}",
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = Tensor::new(shape, values)?;
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let id = model.params.ids().nth(missing).unwrap();
        return Err(bad(format!("missing tensor {:?}", model.params.name(id))));
    }
    if !buf.is_empty() {
        return Err(bad(format!("{} trailing bytes", buf.len())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Translator, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Translator, ModelError> {
    read_checkpoint(std::fs::File::open(path)?)
}

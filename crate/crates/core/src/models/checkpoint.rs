//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "KGELAB01"
//! config_len   u32, then config_len bytes of UTF-8 key=value lines
//! vocab_hash   32 bytes (SHA-256 of the vocabulary)
//! n_tensors    u32
//! per tensor:  name_len u32, name, ndim u32, ndim × u64 extents, f64 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KGELAB01";

/// A decoded checkpoint: parameters, the vocabulary they were trained on and
/// any extra metadata stored in the config block.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab_hash: [u8; 32],
    pub meta: ConfigMap,
}

fn buffers(p: &ModelParams) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    if let Some(c) = &p.conv {
        for (name, bn) in [("bn0", &c.bn_input), ("bn1", &c.bn_conv), ("bn2", &c.bn_hidden)] {
            if let Some(bn) = bn {
                let n = bn.channels();
                out.push((format!("{name}.running_mean"), Tensor::new([n], bn.running_mean.clone()).unwrap()));
                out.push((format!("{name}.running_var"), Tensor::new([n], bn.running_var.clone()).unwrap()));
            }
        }
    }
    out
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ModelParams, vocab_hash: [u8; 32], meta: &ConfigMap) -> Result<()> {
    let path = path.as_ref();
    let mut config = params.config.to_config_map();
    config.set("n_entities", params.n_entities());
    config.set("n_relations", params.n_relations());
    for (k, v) in meta.iter() {
        if !config.contains(k) {
            config.set(k, v);
        }
    }
    let text = config.to_string();

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&vocab_hash);
    let mut tensors: Vec<(String, Tensor)> = params
        .parameters()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.detach()))
        .collect();
    tensors.extend(buffers(params));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            .map_err(|_| Error::Checkpoint("extent overflows usize".into()))
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut rd = Reader { buf: &bytes, pos: 0 };
    if rd.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let len = rd.u32()?;
    let text = std::str::from_utf8(rd.take(len)?).map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let mut meta = ConfigMap::parse(text)?;
    let n_e: usize = meta
        .get("n_entities")?
        .ok_or_else(|| Error::Checkpoint("missing n_entities".into()))?;
    let n_r: usize = meta
        .get("n_relations")?
        .ok_or_else(|| Error::Checkpoint("missing n_relations".into()))?;
    let mut model_keys = ConfigMap::new();
    for key in ModelConfig::KEYS {
        if let Some(v) = meta.remove(key) {
            model_keys.set(key, v);
        }
    }
    meta.remove("n_entities");
    meta.remove("n_relations");
    let config = ModelConfig::from_config_map(&model_keys)?;
    let vocab_hash: [u8; 32] = rd.take(32)?.try_into().unwrap();

    let mut params = ModelParams::init(&config, n_e, n_r, 0)?;
    let expected: Vec<String> = params
        .parameters()
        .iter()
        .map(|(n, _)| n.to_string())
        .chain(buffers(&params).into_iter().map(|(n, _)| n))
        .collect();
    let count = rd.u32()?;
    let mut seen = Vec::new();
    for _ in 0..count {
        let nl = rd.u32()?;
        let name = String::from_utf8(rd.take(nl)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = rd.u32()?;
        let shape: Vec<usize> = (0..ndim).map(|_| rd.u64()).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = rd.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        assign(&mut params, &name, &shape, values)?;
        seen.push(name);
    }
    if let Some(missing) = expected.iter().find(|n| !seen.contains(n)) {
        return Err(Error::Checkpoint(format!("tensor `{missing}` missing")));
    }
    if rd.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { params, vocab_hash, meta })
}

fn assign(p: &mut ModelParams, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
    let mismatch = |want: &[usize]| {
        Error::Checkpoint(format!("tensor `{name}` has shape {shape:?}, expected {want:?}"))
    };
    if let Some((layer, stat)) = name.split_once(".running_") {
        let conv = p.conv.as_mut().ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        let bn = match layer {
            "bn0" => conv.bn_input.as_mut(),
            "bn1" => conv.bn_conv.as_mut(),
            "bn2" => conv.bn_hidden.as_mut(),
            _ => None,
        }
        .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if shape != [bn.channels()] {
            return Err(mismatch(&[bn.channels()]));
        }
        match stat {
            "mean" => bn.running_mean = values,
            "var" => bn.running_var = values,
            _ => return Err(Error::Checkpoint(format!("unexpected tensor `{name}`"))),
        }
        return Ok(());
    }
    for (n, t) in p.parameters_mut() {
        if n == name {
            if t.shape() != shape {
                return Err(mismatch(t.shape()));
            }
            t.data_mut().copy_from_slice(&values);
            return Ok(());
        }
    }
    Err(Error::Checkpoint(format!("unexpected tensor `{name}`")))
}

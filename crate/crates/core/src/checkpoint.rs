//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `MTSUNET\0`, `u32` format version, `u64`
//! length of the JSON model config, the config, `u32` parameter count, then
//! per parameter: `u32` name length, name, `u8` frozen flag, `u32` rank,
//! `u64` dims, `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MtsUnet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MTSUNET\0";
pub const FORMAT_VERSION: u32 = 1;

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn save_checkpoint(model: &MtsUnet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).map_err(|e| ckpt_err(path, e))?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(u8::from(p.frozen));
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(ckpt_err(self.path, "file is truncated"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Read only the embedded model config.
pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, path };
    read_header(&mut c)
}

fn read_header(c: &mut Cursor<'_>) -> Result<ModelConfig> {
    let path = c.path;
    let legacy = || {
        ckpt_err(
            path,
            "no embedded model config (legacy or foreign file); retrain, or re-save the weights with this version",
        )
    };
    if c.bytes.len() < MAGIC.len() || &c.bytes[..MAGIC.len()] != MAGIC {
        return Err(legacy());
    }
    c.take(MAGIC.len())?;
    let version = c.u32()?;
    if version == 0 {
        return Err(legacy());
    }
    if version > FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format version {version} is newer than supported version {FORMAT_VERSION}"),
        ));
    }
    let len = c.u64()? as usize;
    if len == 0 {
        return Err(legacy());
    }
    let cfg = c.take(len)?;
    serde_json::from_slice(cfg).map_err(|e| ckpt_err(path, format!("unreadable model config: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<MtsUnet> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, path };
    let cfg = read_header(&mut c)?;
    let mut model = MtsUnet::new(cfg, 0).map_err(|e| ckpt_err(path, format!("invalid embedded config: {e}")))?;
    let count = c.u32()? as usize;
    if count != model.params().len() {
        return Err(ckpt_err(
            path,
            format!("{count} parameter tensors stored, config builds {}", model.params().len()),
        ));
    }
    let store = model.params_mut();
    for (_, p) in store.iter_mut() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|e| ckpt_err(path, e))?;
        if name != p.name {
            return Err(ckpt_err(path, format!("parameter '{name}' found where '{}' was expected", p.name)));
        }
        let frozen = c.take(1)?[0] != 0;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(ckpt_err(
                path,
                format!("{name}: stored shape {shape:?}, expected {:?}", p.value.shape()),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        p.value = Tensor::from_vec(&shape, data)?;
        p.frozen = frozen;
    }
    if !c.bytes.is_empty() {
        return Err(ckpt_err(path, "trailing bytes after the last parameter"));
    }
    Ok(model)
}

/// Load and require the embedded config to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<MtsUnet> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(ckpt_err(path, config_diff(expected, model.config())));
    }
    Ok(model)
}

/// Human-readable list of differing top-level config fields.
pub fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> String {
    let a = serde_json::to_value(expected).unwrap_or_default();
    let b = serde_json::to_value(found).unwrap_or_default();
    let mut diffs = Vec::new();
    diff_values("", &a, &b, &mut diffs);
    format!("config mismatch: {}", diffs.join("; "))
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, va) in x {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match y.get(k) {
                    Some(vb) => diff_values(&key, va, vb, out),
                    None => out.push(format!("{key} missing")),
                }
            }
        }
        _ if a != b => out.push(format!("{prefix}: expected {a}, found {b}")),
        _ => {}
    }
}

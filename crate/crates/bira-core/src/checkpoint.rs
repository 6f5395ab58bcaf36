//! Binary checkpoint container for model parameters and optimizer state.
//!
//! Layout: magic `BIRA`, format version u32, tensor count u32, then per
//! tensor: name length u32 + UTF-8 name, rank u32, dims as u64 each, row-major
//! f32 little-endian payload. Footer: CRC32 over all payload bytes in file
//! order. Optimizer tensors live under the reserved name prefix `opt/`, the
//! model shape under `meta/model_config`.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::OptimState;
use std::path::Path;

const MAGIC: &[u8; 4] = b"BIRA";
const VERSION: u32 = 1;
const META_NAME: &str = "meta/model_config";

fn push_tensor(
    out: &mut Vec<u8>,
    payload_crc: &mut crc32fast::Hasher,
    name: &str,
    dims: &[u64],
    data: &[f64],
) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in data {
        let bytes = (x as f32).to_le_bytes();
        payload_crc.update(&bytes);
        out.extend_from_slice(&bytes);
    }
}

fn meta_values(config: &ModelConfig) -> Vec<f64> {
    let s = config.init_seed;
    vec![
        config.d_model as f64,
        config.n_layers as f64,
        config.n_heads as f64,
        config.d_ff as f64,
        config.context_len as f64,
        config.vocab_size as f64,
        (s & 0xffff) as f64,
        ((s >> 16) & 0xffff) as f64,
        ((s >> 32) & 0xffff) as f64,
        ((s >> 48) & 0xffff) as f64,
    ]
}

fn config_from_meta(values: &[f64]) -> Result<ModelConfig> {
    if values.len() != 10 {
        return Err(Error::data(format!(
            "checkpoint meta tensor has {} values, expected 10",
            values.len()
        )));
    }
    let seed = (values[6] as u64)
        | ((values[7] as u64) << 16)
        | ((values[8] as u64) << 32)
        | ((values[9] as u64) << 48);
    let config = ModelConfig {
        d_model: values[0] as usize,
        n_layers: values[1] as usize,
        n_heads: values[2] as usize,
        d_ff: values[3] as usize,
        context_len: values[4] as usize,
        vocab_size: values[5] as usize,
        init_seed: seed,
    };
    config.validate()?;
    Ok(config)
}

/// Serialize parameters (and optionally optimizer state) into the container.
pub fn serialize_checkpoint(params: &ModelParams, opt: Option<&OptimState>) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<u64>, Vec<f64>)> = Vec::new();
    entries.push((META_NAME.to_string(), vec![10], meta_values(&params.config)));
    for (name, t) in params.tensors() {
        entries.push((
            name,
            t.dims.iter().map(|&d| d as u64).collect(),
            t.data.clone(),
        ));
    }
    if let Some(opt) = opt {
        entries.push(("opt/step".to_string(), vec![1], vec![opt.step as f64]));
        for (name, t) in opt.m.tensors() {
            entries.push((
                format!("opt/m/{name}"),
                t.dims.iter().map(|&d| d as u64).collect(),
                t.data.clone(),
            ));
        }
        for (name, t) in opt.v.tensors() {
            entries.push((
                format!("opt/v/{name}"),
                t.dims.iter().map(|&d| d as u64).collect(),
                t.data.clone(),
            ));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for (name, dims, data) in &entries {
        push_tensor(&mut out, &mut crc, name, dims, data);
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse the container. Returns the parameters and, when the file carries
/// `opt/` tensors, the optimizer state.
pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<(ModelParams, Option<OptimState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::data("checkpoint missing BIRA magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    let mut crc = crc32fast::Hasher::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::data("checkpoint tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let numel = dims.iter().product::<usize>().max(1);
        let payload = r.take(numel * 4)?;
        crc.update(payload);
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, dims, data));
    }
    let stored_crc = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::data("checkpoint has trailing bytes"));
    }
    if crc.finalize() != stored_crc {
        return Err(Error::data("checkpoint payload CRC mismatch"));
    }

    let meta = tensors
        .iter()
        .find(|(n, _, _)| n == META_NAME)
        .ok_or_else(|| Error::data("checkpoint missing meta/model_config"))?;
    let config = config_from_meta(&meta.2)?;

    let mut params = ModelParams::zeros(config)?;
    let mut opt_present = false;
    let mut opt = OptimState::new(&params);
    let mut assigned = 0usize;

    {
        let assign =
            |target: &mut ModelParams, name: &str, dims: &[usize], data: &[f64]| -> Result<bool> {
                for (tname, t) in target.tensors_mut() {
                    if tname == name {
                        if t.dims != dims {
                            return Err(Error::data(format!(
                                "checkpoint tensor {name} has dims {dims:?}, expected {:?}",
                                t.dims
                            )));
                        }
                        t.data.copy_from_slice(data);
                        return Ok(true);
                    }
                }
                Ok(false)
            };

        for (name, dims, data) in &tensors {
            if name == META_NAME {
                continue;
            }
            if let Some(rest) = name.strip_prefix("opt/") {
                opt_present = true;
                if rest == "step" {
                    opt.step = data.first().copied().unwrap_or(0.0) as u64;
                    continue;
                }
                let hit = if let Some(mn) = rest.strip_prefix("m/") {
                    assign(&mut opt.m, mn, dims, data)?
                } else if let Some(vn) = rest.strip_prefix("v/") {
                    assign(&mut opt.v, vn, dims, data)?
                } else {
                    false
                };
                if !hit {
                    return Err(Error::data(format!("unknown optimizer tensor {name}")));
                }
                continue;
            }
            if assign(&mut params, name, dims, data)? {
                assigned += 1;
            } else {
                return Err(Error::data(format!("unknown checkpoint tensor {name}")));
            }
        }
    }

    let expected = params.tensors().len();
    if assigned != expected {
        return Err(Error::data(format!(
            "checkpoint has {assigned} model tensors, expected {expected}"
        )));
    }
    Ok((params, opt_present.then_some(opt)))
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, opt: Option<&OptimState>) -> Result<()> {
    std::fs::write(path, serialize_checkpoint(params, opt))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, Option<OptimState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    deserialize_checkpoint(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Round parameters through the f32 storage format. Training stages start
/// from this so that in-memory state matches the checkpoint file bit for bit.
pub fn f32_roundtrip(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    for (_, t) in out.tensors_mut() {
        for x in &mut t.data {
            *x = *x as f32 as f64;
        }
    }
    out
}

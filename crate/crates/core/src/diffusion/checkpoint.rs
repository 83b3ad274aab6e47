//! Binary checkpoint container.
//!
//! Little-endian: `"MIPW"`, u32 version, u32 tensor count, then per tensor
//! u16 name length, UTF-8 name, u8 ndim, u32 dims, f32 data; finally the
//! CRC32 of every preceding byte. The model config travels as a 1-D tensor
//! named `config`.

use std::path::Path;

use crate::error::{Error, Result};

use super::config::{MergeMode, ModelConfig};
use super::params::DenoiserParams;

pub const MAGIC: &[u8; 4] = b"MIPW";
pub const VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "config";

fn config_record(c: &ModelConfig) -> Vec<f64> {
    [
        c.height,
        c.width,
        c.latent_channels,
        c.dim,
        c.text_dim,
        c.image_dim,
        c.clip_dim,
        c.image_tokens,
        c.layers,
        c.mlp_hidden,
        c.time_dim,
        c.max_text_len,
        c.vocab,
        c.timesteps,
        c.merge_mode.code() as usize,
    ]
    .iter()
    .map(|&v| v as f64)
    .collect()
}

fn config_from_record(v: &[f64], offset: u64) -> Result<ModelConfig> {
    let bad = |m: &str| Error::Format {
        offset,
        message: m.to_string(),
    };
    if v.len() != 15 {
        return Err(bad("config record has the wrong length"));
    }
    let u = |i: usize| v[i] as usize;
    let merge_mode =
        MergeMode::from_code(v[14] as u32).ok_or_else(|| bad("unknown merge mode code"))?;
    let c = ModelConfig {
        height: u(0),
        width: u(1),
        latent_channels: u(2),
        dim: u(3),
        text_dim: u(4),
        image_dim: u(5),
        clip_dim: u(6),
        image_tokens: u(7),
        layers: u(8),
        mlp_hidden: u(9),
        time_dim: u(10),
        max_text_len: u(11),
        vocab: u(12),
        timesteps: u(13),
        merge_mode,
    };
    c.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(c)
}

pub fn encode_checkpoint(params: &DenoiserParams) -> Result<Vec<u8>> {
    let tensors = params.tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32 + 1).to_le_bytes());
    let mut write = |name: &str, dims: &[usize], data: &[f64]| -> Result<()> {
        for &v in data {
            if (v as f32) as f64 != v {
                return Err(Error::argument(format!(
                    "{name} holds {v}, which is not exactly representable at 32 bits"
                )));
            }
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(())
    };
    let rec = config_record(&params.config);
    write(CONFIG_TENSOR, &[rec.len()], &rec)?;
    for t in &tensors {
        write(&t.name, &[t.shape.0, t.shape.1], t.data)?;
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenoiserParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"MIPW\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            ),
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut config = None;
    for _ in 0..count {
        let start = r.pos as u64;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: start + 2,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.take(1, "ndim")?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &format!("data of {name}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if name == CONFIG_TENSOR {
            config = Some(config_from_record(&data, start)?);
            continue;
        }
        let shape = match dims.as_slice() {
            [a, b] => (*a, *b),
            _ => {
                return Err(Error::Format {
                    offset: start,
                    message: format!("{name}: expected 2 dims, found {ndim}"),
                })
            }
        };
        entries.push((name, shape, data));
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: "trailing bytes after checksum".into(),
        });
    }
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::Format {
            offset: body_end as u64,
            message: "checksum mismatch".into(),
        });
    }
    let config = config.ok_or_else(|| Error::Format {
        offset: 12,
        message: "missing config record".into(),
    })?;
    let mut params = DenoiserParams::init(&config, 0)?;
    params.assign(&entries).map_err(|e| Error::Format {
        offset: 12,
        message: e.to_string(),
    })?;
    Ok(params)
}

pub fn save_checkpoint(params: &DenoiserParams, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! IDNP checkpoints.
//!
//! Layout (little-endian): magic `IDNP`, version `u16`, 32-byte SHA-256 of
//! the canonical model config, then two tensor sections (live weights, then
//! the EMA copy). A section is a `u32` tensor count followed by, per tensor,
//! name length `u16`, name bytes, rank `u8`, dims `u32` × rank and an `f32`
//! body.

use std::fs;
use std::path::Path;

use impervia_core::denoiser::{Denoiser, DenoiserConfig};
use sha2::{Digest, Sha256};

use crate::igrd::write_atomic;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IDNP";
pub const VERSION: u16 = 1;

/// Canonical `key=value` text of the model config.
pub fn config_text(cfg: &DenoiserConfig) -> String {
    format!(
        "depth={}\nbase_channels={}\ngn_groups={}\nembed_dim={}\nn_cond={}\ninput_side={}\nspade_hidden={}\n",
        cfg.depth, cfg.base_channels, cfg.gn_groups, cfg.embed_dim, cfg.n_cond, cfg.input_side, cfg.spade_hidden
    )
}

pub fn config_digest(cfg: &DenoiserConfig) -> [u8; 32] {
    Sha256::digest(config_text(cfg).as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub ema: Vec<f64>,
}

impl Checkpoint {
    /// The EMA weights as a ready model.
    pub fn ema_model(&self) -> Result<Denoiser> {
        Ok(self.model.with_params(&self.ema)?)
    }
}

fn write_section(out: &mut Vec<u8>, model: &Denoiser, values: &[f64]) -> Result<()> {
    out.extend_from_slice(&(model.tensors().len() as u32).to_le_bytes());
    for t in model.tensors() {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name {} too long", t.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &values[t.range()] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode(model: &Denoiser, ema: &[f64]) -> Result<Vec<u8>> {
    if ema.len() != model.param_count() {
        return Err(Error::Schema(format!("EMA has {} values, model {}", ema.len(), model.param_count())));
    }
    let mut out = Vec::with_capacity(64 + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(model.config()));
    write_section(&mut out, model, model.params())?;
    write_section(&mut out, model, ema)?;
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_section(r: &mut Reader<'_>, layout: &Denoiser) -> Result<Vec<f64>> {
    let count = r.u32()? as usize;
    if count != layout.tensors().len() {
        return Err(Error::Schema(format!("{count} tensors, config expects {}", layout.tensors().len())));
    }
    let mut values = vec![0.0; layout.param_count()];
    for t in layout.tensors() {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != t.name {
            return Err(Error::Schema(format!("tensor {name} where {} was expected", t.name)));
        }
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != t.dims {
            return Err(Error::Schema(format!("tensor {name} has dims {dims:?}, expected {:?}", t.dims)));
        }
        for (slot, c) in values[t.range()].iter_mut().zip(r.take(4 * t.len())?.chunks_exact(4)) {
            *slot = f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")));
        }
    }
    Ok(values)
}

/// Decodes a checkpoint written for `cfg`; a different config is rejected
/// through the digest.
pub fn decode(bytes: &[u8], cfg: &DenoiserConfig) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an IDNP checkpoint".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported IDNP version {version}")));
    }
    let digest = r.take(32)?;
    if digest != config_digest(cfg) {
        return Err(Error::Schema(format!(
            "checkpoint config digest {} does not match the configured model {}",
            hex::encode(digest),
            hex::encode(config_digest(cfg))
        )));
    }
    let layout = Denoiser::new(*cfg, 0)?;
    let params = read_section(&mut r, &layout)?;
    let ema = read_section(&mut r, &layout)?;
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint { model: layout.with_params(&params)?, ema })
}

pub fn save(path: impl AsRef<Path>, model: &Denoiser, ema: &[f64]) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model, ema)?)
}

pub fn load(path: impl AsRef<Path>, cfg: &DenoiserConfig) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig { depth: 1, base_channels: 2, gn_groups: 1, embed_dim: 4, n_cond: 1, input_side: 4, spade_hidden: 2 }
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        let m = Denoiser::new(cfg(), 3).unwrap();
        let ema: Vec<f64> = m.params().iter().map(|p| p * 0.5).collect();
        let bytes = encode(&m, &ema).unwrap();
        let ck = decode(&bytes, &cfg()).unwrap();
        for (a, b) in ck.model.params().iter().zip(m.params()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
        assert_eq!(encode(&ck.model, &ck.ema).unwrap(), bytes);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let m = Denoiser::new(cfg(), 3).unwrap();
        let bytes = encode(&m, m.params()).unwrap();
        let other = DenoiserConfig { spade_hidden: 3, ..cfg() };
        assert!(matches!(decode(&bytes, &other), Err(Error::Schema(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 2], &cfg()), Err(Error::Format(_))));
    }
}

//! Binary checkpoint codec.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "ALPS" | version u32
//! resolution u32 | latent_dim u32 | delta_max f64
//! encoder_channels 3 x u32 | decoder_seed_channels u32 | decoder_channels 5 x u32
//! parameter count u32
//! per parameter: name length u32 | UTF-8 name | rank u32 | dims rank x u32 | values f32
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::models::{AlpsModel, ModelConfig};
use crate::nn::ParameterSet;
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"ALPS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type CkResult<T> = core::result::Result<T, CheckpointError>;

pub fn encode(model: &AlpsModel<f32>) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, c.resolution as u32);
    put_u32(&mut out, c.latent_dim as u32);
    out.extend_from_slice(&c.delta_max.to_le_bytes());
    c.encoder_channels.iter().for_each(|&v| put_u32(&mut out, v as u32));
    put_u32(&mut out, c.decoder_seed_channels as u32);
    c.decoder_channels.iter().for_each(|&v| put_u32(&mut out, v as u32));
    let sets = model.parameter_sets();
    put_u32(&mut out, sets.iter().map(|s| s.len()).sum::<usize>() as u32);
    for (name, t) in sets.iter().flat_map(|s| s.iter()) {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        t.shape().iter().for_each(|&d| put_u32(&mut out, d as u32));
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CkResult<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated { offset: self.bytes.len() });
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> CkResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn usize(&mut self) -> CkResult<usize> {
        self.u32().map(|v| v as usize)
    }
}

pub fn decode(bytes: &[u8]) -> crate::Result<AlpsModel<f32>> {
    let mut r = Reader { bytes, at: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version }.into());
    }
    let resolution = r.usize()?;
    let latent_dim = r.usize()?;
    let dm = r.take(8)?;
    let delta_max = f64::from_le_bytes(dm.try_into().expect("8 bytes"));
    let mut encoder_channels = [0; 3];
    for c in &mut encoder_channels {
        *c = r.usize()?;
    }
    let decoder_seed_channels = r.usize()?;
    let mut decoder_channels = [0; 5];
    for c in &mut decoder_channels {
        *c = r.usize()?;
    }
    let config = ModelConfig { resolution, latent_dim, delta_max, encoder_channels, decoder_seed_channels, decoder_channels };
    config.validate().map_err(|e| CheckpointError::Malformed(alloc::format!("{e}")))?;

    let count = r.usize()?;
    let mut sets = [ParameterSet::new(), ParameterSet::new(), ParameterSet::new()];
    for _ in 0..count {
        let len = r.usize()?;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let rank = r.usize()?;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Malformed(alloc::format!("parameter {name} has rank {rank}")).into());
        }
        let dims = (0..rank).map(|_| r.usize()).collect::<CkResult<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| CheckpointError::Malformed("parameter size overflows".into()))?;
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated { offset: bytes.len() })?)?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let tensor = Tensor::from_vec(&dims, values).map_err(|e| CheckpointError::Malformed(alloc::format!("{e}")))?;
        let slot = match name.split('.').next() {
            Some("encoder") => 0,
            Some("decoder") => 1,
            Some("distorter") => 2,
            _ => return Err(CheckpointError::Malformed(alloc::format!("unknown parameter {name}")).into()),
        };
        sets[slot].insert(name, tensor).map_err(|e| CheckpointError::Malformed(alloc::format!("{e}")))?;
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Malformed(alloc::format!("{} trailing bytes", bytes.len() - r.at)).into());
    }
    let [enc, dec, dist] = sets;
    AlpsModel::from_parameters(config, enc, dec, dist)
        .map_err(|e| CheckpointError::Malformed(alloc::format!("{e}")).into())
}

//! Binary checkpoint format.
//!
//! Layout, all integers little-endian u32 and all values little-endian f64:
//!
//! ```text
//! "UESA1"
//! n_tensors
//! n_tensors x { name_len, name bytes, rank, dims[rank] }
//! raw f64 values per tensor, in manifest order
//! n_stats
//! n_stats x { name_len, name bytes, channels, mean[channels], var[channels] }
//! ```
//!
//! The manifest order is the parameter declaration order, so save → load →
//! save round-trips byte-identically.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"UESA1";

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let named = params.named_tensors();
    let stats = params.named_stats();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, named.len() as u32);
    for (name, tensor) in &named {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, tensor.rank() as u32);
        for &d in tensor.shape() {
            push_u32(&mut out, d as u32);
        }
    }
    for (_, tensor) in &named {
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    push_u32(&mut out, stats.len() as u32);
    for (name, s) in &stats {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, s.mean.len() as u32);
        for &v in &s.mean {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &s.var {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decode a checkpoint produced for `cfg`. The manifest must match the
/// parameter set implied by the config exactly — names, order and shapes —
/// otherwise the checkpoint belongs to a different model.
pub fn decode_checkpoint(bytes: &[u8], cfg: &ModelConfig) -> Result<ModelParams> {
    let mut cursor = Cursor::new(bytes);
    let magic = cursor.take(MAGIC.len(), "magic header")?;
    if magic != MAGIC {
        return Err(Error::parse(0, "bad magic: not a UESA1 checkpoint"));
    }

    let n_tensors = cursor.u32("tensor count")? as usize;
    let mut manifest = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = cursor.string("tensor name")?;
        let rank = cursor.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cursor.u32("tensor dim")? as usize);
        }
        manifest.push((name, dims));
    }

    let mut params = ModelParams::skeleton(cfg)?;
    {
        let expected = params.named_tensors();
        if expected.len() != manifest.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, config implies {}",
                manifest.len(),
                expected.len()
            )));
        }
        for ((name, dims), (want_name, want_tensor)) in manifest.iter().zip(&expected) {
            if name != want_name || dims != want_tensor.shape() {
                return Err(Error::invalid(format!(
                    "checkpoint entry `{name}` {dims:?} does not match expected `{want_name}` {:?}",
                    want_tensor.shape()
                )));
            }
        }
    }

    let shapes: Vec<Vec<usize>> = manifest.iter().map(|(_, d)| d.clone()).collect();
    for (slot, dims) in params.tensors_mut().into_iter().zip(&shapes) {
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cursor.f64("tensor value")?);
        }
        *slot = Tensor::new(dims.clone(), data)?;
    }

    let n_stats = cursor.u32("stat count")? as usize;
    let stat_names: Vec<String> = params.named_stats().iter().map(|(n, _)| n.clone()).collect();
    if n_stats != stat_names.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {n_stats} stat entries, config implies {}",
            stat_names.len()
        )));
    }
    for (slot_idx, want_name) in stat_names.iter().enumerate() {
        let name = cursor.string("stat name")?;
        if &name != want_name {
            return Err(Error::invalid(format!(
                "stat entry `{name}` does not match expected `{want_name}`"
            )));
        }
        let channels = cursor.u32("stat channels")? as usize;
        let want_channels = params.named_stats()[slot_idx].1.mean.len();
        if channels != want_channels {
            return Err(Error::invalid(format!(
                "stat `{name}` has {channels} channels, expected {want_channels}"
            )));
        }
        let mut mean = Vec::with_capacity(channels);
        for _ in 0..channels {
            mean.push(cursor.f64("stat mean")?);
        }
        let mut var = Vec::with_capacity(channels);
        for _ in 0..channels {
            var.push(cursor.f64("stat var")?);
        }
        let mut stats = params.stats_mut();
        stats[slot_idx].mean = mean;
        stats[slot_idx].var = var;
    }

    if cursor.pos != bytes.len() {
        return Err(Error::parse(
            cursor.pos,
            format!("{} trailing bytes after checkpoint payload", bytes.len() - cursor.pos),
        ));
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes, cfg)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.pos, format!("truncated while reading {what}")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::parse(at, format!("{what} is not valid UTF-8")))
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = ModelConfig {
            depth: 2,
            base_filters: 4,
            input_size: 16,
            ..ModelConfig::desk()
        };
        let mut params = ModelParams::init(&cfg).unwrap();
        // make the running stats non-trivial so the stats section is exercised
        for stats in params.stats_mut() {
            for (i, v) in stats.mean.iter_mut().enumerate() {
                *v = 0.01 * i as f64 - 0.3;
            }
            for (i, v) in stats.var.iter_mut().enumerate() {
                *v = 1.0 + 0.1 * i as f64;
            }
        }

        let bytes = encode_checkpoint(&params);
        let restored = decode_checkpoint(&bytes, &cfg).unwrap();
        assert_eq!(restored, params);
        let bytes2 = encode_checkpoint(&restored);
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let cfg = ModelConfig {
            depth: 1,
            base_filters: 2,
            input_size: 8,
            ..ModelConfig::desk()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let bytes = encode_checkpoint(&params);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, &cfg),
            Err(Error::Parse { .. })
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_checkpoint(truncated, &cfg),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn rejects_config_mismatch() {
        let cfg = ModelConfig {
            depth: 2,
            base_filters: 4,
            input_size: 16,
            ..ModelConfig::desk()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let bytes = encode_checkpoint(&params);

        let other = ModelConfig {
            depth: 3,
            base_filters: 4,
            input_size: 16,
            ..ModelConfig::desk()
        };
        assert!(matches!(
            decode_checkpoint(&bytes, &other),
            Err(Error::InvalidArgument(_))
        ));

        let wider = ModelConfig {
            base_filters: 8,
            ..cfg
        };
        assert!(matches!(
            decode_checkpoint(&bytes, &wider),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rejects_trailing_garbage() {
        let cfg = ModelConfig {
            depth: 1,
            base_filters: 2,
            input_size: 8,
            ..ModelConfig::desk()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let mut bytes = encode_checkpoint(&params);
        bytes.push(0);
        assert!(matches!(
            decode_checkpoint(&bytes, &cfg),
            Err(Error::Parse { .. })
        ));
    }
}

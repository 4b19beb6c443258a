//! Model file: `b"SGPM"`, `u32` version, config block (five `u32`), `u32`
//! tensor count, then per tensor: `u16` name length, UTF-8 name, `u8` rank,
//! `u32` dims, `u8` trainable flag and the little-endian `f32` values.

use super::{NetworkConfig, TransitionKernelModel};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"SGPM";
pub const MODEL_VERSION: u32 = 1;

pub fn serialize_model(model: &TransitionKernelModel<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.param_count() * 4);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let c = model.config;
    for v in [c.base_channels, c.channel_mult, c.depth, c.blocks_per_level, c.feature_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (p, values) in model.params().iter().zip(model.values()) {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(p.trainable as u8);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Length { expected: end, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn deserialize_model(bytes: &[u8]) -> Result<TransitionKernelModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("model version {version}, expected {MODEL_VERSION}")));
    }
    let mut cfg = [0usize; 5];
    for v in cfg.iter_mut() {
        *v = r.u32()? as usize;
    }
    let config = NetworkConfig {
        base_channels: cfg[0],
        channel_mult: cfg[1],
        depth: cfg[2],
        blocks_per_level: cfg[3],
        feature_dim: cfg[4],
    };
    if config.depth > 6 || config.base_channels > 1024 || config.blocks_per_level > 8 || config.feature_dim > 1024 {
        return Err(Error::Format(format!("implausible network config {config:?}")));
    }
    let mut model = TransitionKernelModel::new(config, 0).map_err(|e| Error::Format(e.to_string()))?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::Format(format!("{count} tensors, architecture has {}", model.params().len())));
    }
    let mut values = Vec::with_capacity(count);
    for p in model.params() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != p.name {
            return Err(Error::Format(format!("tensor {name:?} where {:?} was expected", p.name)));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != p.shape {
            return Err(Error::Format(format!("tensor {name} has shape {shape:?}, expected {:?}", p.shape)));
        }
        let _trainable = r.u8()?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> =
            r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value in tensor {name}")));
        }
        values.push(data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after parameter table".into()));
    }
    model.replace_values(values)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_sizes() {
        for depth in [1, 2] {
            let m = TransitionKernelModel::new(NetworkConfig::with_depth(depth), 5).unwrap();
            let bytes = serialize_model(&m);
            let back = deserialize_model(&bytes).unwrap();
            assert_eq!(back, m);
            let header = bytes.len() - 4 * m.param_count();
            assert!(header < 8192, "header {header}");
        }
    }

    #[test]
    fn version_mismatch() {
        let m = TransitionKernelModel::new(NetworkConfig::with_depth(1), 5).unwrap();
        let mut bytes = serialize_model(&m);
        bytes[4] = 9;
        assert!(matches!(deserialize_model(&bytes), Err(Error::Format(_))));
        let bytes = serialize_model(&m);
        assert!(deserialize_model(&bytes[..bytes.len() - 1]).is_err());
    }
}

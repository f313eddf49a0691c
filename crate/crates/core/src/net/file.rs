//! Parameter file: magic `PIEP`, version u16, the network configuration as
//! length-prefixed `key=value` text, then every tensor as a u32 length
//! followed by little-endian f64 values, in [`NetParams::tensors`] order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::model::NetParams;
use super::{ConfigFile, TrainConfig};

const MAGIC: &[u8; 4] = b"PIEP";
const VERSION: u16 = 1;

pub fn encode_params(params: &NetParams) -> Vec<u8> {
    let cfg = ConfigFile {
        net: params.config.clone(),
        n3_given: true,
        train: TrainConfig::default(),
    }
    .to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    for (_, t) in params.tensors() {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("parameter file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<NetParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("parameter file magic mismatch".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported parameter file version {version}")));
    }
    let len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(len)?)
        .map_err(|_| Error::Format("parameter file config is not UTF-8".into()))?;
    let cfg = ConfigFile::parse(text)?;
    cfg.net.validate()?;
    let mut params = NetParams::zeros(&cfg.net);
    for t in params.tensors_mut() {
        let n = cur.u32()? as usize;
        if n != t.len() {
            return Err(Error::Format(format!(
                "tensor has {n} values, configuration expects {}",
                t.len()
            )));
        }
        for (v, chunk) in t.iter_mut().zip(cur.take(n * 8)?.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    Ok(params)
}

pub fn write_params(path: impl AsRef<Path>, params: &NetParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<NetParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, NetConfig, Variant};

    #[test]
    fn roundtrip_and_truncation() {
        let cfg = Variant::NoConf.apply(&NetConfig {
            input_h: 8,
            input_w: 8,
            conv_channels: vec![2],
            n1: 3,
            ..NetConfig::toy(5)
        });
        let p = init_params(&cfg, 3).unwrap();
        let bytes = encode_params(&p);
        assert_eq!(decode_params(&bytes).unwrap(), p);
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(decode_params(&bad).is_err());
    }
}

//! Binary model files.
//!
//! Layout (all integers little-endian):
//! `"FDN1"`, `u32` format version, `u32` descriptor length, descriptor JSON
//! (the [`Architecture`]), then for every parameter tensor in
//! [`UNetModel::params`] order: `u32` axis count, one `u32` per axis, and the
//! raw `f32` values.

use std::path::Path;

use super::unet::{Architecture, UNetModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FDN1";
pub const FORMAT_VERSION: u32 = 1;

pub fn model_to_bytes(model: &UNetModel) -> Vec<u8> {
    let descriptor = serde_json::to_vec(model.architecture()).expect("architecture serializes");
    let mut out = Vec::with_capacity(16 + descriptor.len() + 4 * model.parameter_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(&descriptor);
    for t in model.params() {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(Error::Parse(format!(
                "truncated {what} at offset {}: expected {n} bytes, found {remaining}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<UNetModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Parse("bad magic at offset 0".into()));
    }
    r.pos = 4;
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported format version {version} at offset 4"
        )));
    }
    let len = r.u32("descriptor length")? as usize;
    let at = r.pos;
    let descriptor = r.take(len, "descriptor")?;
    let arch: Architecture = serde_json::from_slice(descriptor)
        .map_err(|e| Error::Parse(format!("bad descriptor at offset {at}: {e}")))?;
    let mut model = UNetModel::zeros(arch).map_err(|e| Error::Parse(format!("descriptor: {e}")))?;

    for (index, param) in model.params_mut().into_iter().enumerate() {
        let at = r.pos;
        let axes = r.u32("axis count")? as usize;
        let mut dims = Vec::with_capacity(axes);
        for _ in 0..axes {
            dims.push(r.u32("tensor dims")? as usize);
        }
        if dims != param.shape() {
            return Err(Error::Parse(format!(
                "tensor {index} at offset {at}: shape {dims:?} does not match architecture {:?}",
                param.shape()
            )));
        }
        let raw = r.take(4 * param.len(), &format!("tensor {index} data"))?;
        for (v, chunk) in param.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes at offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(model)
}

pub fn save_model(model: &UNetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<UNetModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> UNetModel {
        let arch = Architecture {
            base_channels: 3,
            depth: 2,
            ..Architecture::default()
        };
        UNetModel::new(arch, 77).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fdn");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back, m);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = model_to_bytes(&model());
        bytes[0] = b'X';
        let err = model_from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "parse error: bad magic at offset 0");
    }

    #[test]
    fn truncated_mid_tensor() {
        let bytes = model_to_bytes(&model());
        let cut = &bytes[..bytes.len() - 10];
        let msg = model_from_bytes(cut).unwrap_err().to_string();
        assert!(msg.contains("expected") && msg.contains("found"), "{msg}");
        assert!(msg.contains("tensor"), "{msg}");
    }

    #[test]
    fn header_starts_with_magic_and_version() {
        let bytes = model_to_bytes(&model());
        assert_eq!(&bytes[..4], b"FDN1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = model_to_bytes(&model());
        bytes.push(0);
        assert!(model_from_bytes(&bytes).unwrap_err().is_config());
    }
}

//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"AFCK"
//! version u8 (= 1)
//! meta_len u32, meta (JSON, UTF-8)
//! n_records u32
//! record: name_len u16, name, kind u8 (0 trainable | 1 buffer),
//!         dtype u8 (4 = f32 | 8 = f64), ndim u8, dims u32 x ndim,
//!         payload (raw little-endian floats)
//! ```
//!
//! Round-trips are bit-exact: payloads are the IEEE bit patterns.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::params::{ParamEntry, ParameterSet};
use super::ParamKind;

const MAGIC: &[u8; 4] = b"AFCK";
const VERSION: u8 = 1;

pub fn write_checkpoint<F: Element>(
    path: &Path,
    meta: &serde_json::Value,
    params: &ParameterSet<F>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    let meta_bytes = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.iter() {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        buf.push(F::BYTE_WIDTH);
        buf.push(e.value.shape().len() as u8);
        for d in e.value.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            v.write_le(&mut buf);
        }
    }
    atomic_write(path, &buf)
}

/// Write via a temp file in the same directory, then rename, so a crash
/// never leaves a truncated checkpoint behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint<F: Element> {
    pub meta: serde_json::Value,
    pub params: ParameterSet<F>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<F: Element>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len, "meta")?)?;
    let n_records = r.u32("record count")? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..n_records {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("invalid parameter name: {e}")))?
            .to_string();
        let kind = match r.u8("kind")? {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::Checkpoint(format!("unknown param kind {k}"))),
        };
        let dtype = r.u8("dtype")?;
        if dtype != F::BYTE_WIDTH {
            return Err(Error::Checkpoint(format!(
                "dtype width {dtype} does not match requested element width {}",
                F::BYTE_WIDTH
            )));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let w = F::BYTE_WIDTH as usize;
        let payload = r.take(numel * w, "payload")?;
        let data: Vec<F> = payload.chunks_exact(w).map(F::read_le).collect();
        params.insert(ParamEntry { name, value: Tensor::from_vec(&shape, data)?, grad: None, kind })?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { meta, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(values: Vec<f32>) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut set = ParameterSet::new();
        set.insert(ParamEntry {
            name: "a.weight".into(),
            value: Tensor::from_vec(&[values.len()], values.clone()).unwrap(),
            grad: None,
            kind: ParamKind::Trainable,
        })
        .unwrap();
        write_checkpoint(&path, &serde_json::json!({"k": "v"}), &set).unwrap();
        let back: Checkpoint<f32> = read_checkpoint(&path).unwrap();
        let got = back.params.get("a.weight").unwrap();
        // bit-exact comparison
        let want_bits: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
        let got_bits: Vec<u32> = got.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(want_bits, got_bits);
        assert_eq!(back.meta["k"], "v");
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in proptest::collection::vec(any::<f32>(), 0..64)) {
            roundtrip(values);
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut set = ParameterSet::<f32>::new();
        set.insert(ParamEntry {
            name: "w".into(),
            value: Tensor::filled(&[8], 1.0),
            grad: None,
            kind: ParamKind::Trainable,
        })
        .unwrap();
        write_checkpoint(&path, &serde_json::json!({}), &set).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut set = ParameterSet::<f32>::new();
        set.insert(ParamEntry {
            name: "w".into(),
            value: Tensor::filled(&[2], 1.0),
            grad: None,
            kind: ParamKind::Trainable,
        })
        .unwrap();
        write_checkpoint(&path, &serde_json::json!({}), &set).unwrap();
        assert!(read_checkpoint::<f64>(&path).is_err());
    }
}

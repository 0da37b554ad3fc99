//! NGPD: the little-endian binary container used for datasets, checkpoints
//! and prediction dumps.
//!
//! Layout: magic `NGPD`, u32 format version, a metadata block of UTF-8
//! key/value pairs, a block of named f64 tensors, and a trailing CRC-32 of
//! every preceding byte. Readers reject bad magic, unknown versions,
//! truncation and checksum mismatches, so a partially written or corrupted
//! file never parses.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{NogapError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NGPD";
const VERSION: u32 = 1;

/// In-memory form of one container file. Metadata keys are sorted so the
/// byte stream is a pure function of the contents.
#[derive(Clone, Debug, Default)]
pub struct NgpdFile {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl NgpdFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(|s| s.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| NogapError::format("ngpd", format!("missing metadata key '{key}'")))
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| NogapError::format("ngpd", format!("missing tensor '{name}'")))
    }

    /// Serialize to bytes (deterministic for identical contents).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_u32(&mut buf, self.metadata.len(), "metadata count")?;
        for (k, v) in &self.metadata {
            write_str(&mut buf, k)?;
            write_str(&mut buf, v)?;
        }
        write_u32(&mut buf, self.tensors.len(), "tensor count")?;
        for (name, t) in &self.tensors {
            write_str(&mut buf, name)?;
            write_u32(&mut buf, t.rank(), "tensor rank")?;
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 4 {
            return Err(NogapError::format("ngpd", "file too short to be a container"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
        let actual_crc = crc32fast::hash(body);
        if stored_crc != actual_crc {
            return Err(NogapError::format(
                "ngpd",
                format!("checksum mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}"),
            ));
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(NogapError::format("ngpd", "bad magic bytes"));
        }
        let version = cur.read_u32()?;
        if version != VERSION {
            return Err(NogapError::format("ngpd", format!("unsupported version {version}")));
        }
        let n_meta = cur.read_u32()? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = cur.read_str()?;
            let v = cur.read_str()?;
            metadata.insert(k, v);
        }
        let n_tensors = cur.read_u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = cur.read_str()?;
            let rank = cur.read_u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = cur.read_u64()?;
                shape.push(usize::try_from(d).map_err(|_| {
                    NogapError::format("ngpd", format!("dimension {d} exceeds platform usize"))
                })?);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != body.len() {
            return Err(NogapError::format(
                "ngpd",
                format!("{} trailing bytes after tensor block", body.len() - cur.pos),
            ));
        }
        Ok(NgpdFile { metadata, tensors })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write via a sibling temp file and rename so a crash mid-write
        // never leaves a half-written container at the target path.
        let path = path.as_ref();
        let tmp = path.with_extension("ngpd.tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            NogapError::Format { context, message } => NogapError::Format {
                context,
                message: format!("{}: {message}", path.as_ref().display()),
            },
            other => other,
        })
    }

    /// SHA-256 of the serialized byte stream, as lowercase hex.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

fn write_u32(buf: &mut Vec<u8>, n: usize, what: &str) -> Result<()> {
    let n = u32::try_from(n)
        .map_err(|_| NogapError::format("ngpd", format!("{what} {n} exceeds u32")))?;
    buf.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    write_u32(buf, s.len(), "string length")?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NogapError::format(
                "ngpd",
                format!("truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn read_str(&mut self) -> Result<String> {
        let len = self.read_u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| NogapError::format("ngpd", "string field is not valid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NgpdFile {
        let mut f = NgpdFile::new();
        f.insert_meta("problem", "advection");
        f.insert_meta("seed", "17");
        f.push_tensor("inputs", Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 1e-300, 7.0]).unwrap());
        f.push_tensor("scalar", Tensor::scalar(0.5));
        f
    }

    #[test]
    fn round_trip_bytes() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let g = NgpdFile::from_bytes(&bytes).unwrap();
        assert_eq!(g.meta("problem"), Some("advection"));
        assert_eq!(g.meta("seed"), Some("17"));
        assert_eq!(g.tensor("inputs").unwrap().shape(), &[2, 3]);
        assert_eq!(g.tensor("inputs").unwrap().data(), f.tensor("inputs").unwrap().data());
        assert_eq!(g.tensor("scalar").unwrap().item().unwrap(), 0.5);
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(sample().to_bytes().unwrap(), sample().to_bytes().unwrap());
        let mut reordered = NgpdFile::new();
        reordered.insert_meta("seed", "17");
        reordered.insert_meta("problem", "advection");
        let mut f = NgpdFile::new();
        f.insert_meta("problem", "advection");
        f.insert_meta("seed", "17");
        assert_eq!(f.to_bytes().unwrap(), reordered.to_bytes().unwrap());
    }

    #[test]
    fn truncation_detected_at_every_length() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(
                NgpdFile::from_bytes(&bytes[..cut]).is_err(),
                "truncation to {cut} bytes parsed"
            );
        }
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        for i in [0, 4, 9, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(NgpdFile::from_bytes(&bad).is_err(), "flip at byte {i} parsed");
        }
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.extend_from_slice(&[0, 1, 2, 3]);
        assert!(NgpdFile::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip_and_hash() {
        let dir = std::env::temp_dir().join(format!("ngpd-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sample.ngpd");
        let f = sample();
        f.write_to(&path).unwrap();
        let g = NgpdFile::read_from(&path).unwrap();
        assert_eq!(f.to_bytes().unwrap(), g.to_bytes().unwrap());
        assert_eq!(f.content_hash().unwrap(), g.content_hash().unwrap());
        assert_eq!(f.content_hash().unwrap().len(), 64);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn sha256_known_vector() {
        // SHA-256 of the empty string.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}

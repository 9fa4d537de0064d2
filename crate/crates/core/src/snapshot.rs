//! Immutable 32-bit parameter bundles and their binary file format.
//!
//! Layout: magic `PTATSNAP`, u32 version, 32-byte config hash, u32 tensor
//! count, then per tensor u16 name length, name, u32 rows, u32 cols and
//! row-major f32 values; a trailing CRC32 covers everything after the version
//! field. All integers and floats are little-endian.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use diffmath::Matrix;

use crate::error::{Result, SnapshotError};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"PTATSNAP";
pub const FORMAT_VERSION: u32 = 1;
const STEP_TENSOR: &str = "meta.step";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    /// Every value is exactly representable in f32.
    params: ParamStore,
    pub config_hash: [u8; 32],
    pub step: usize,
}

impl ModelSnapshot {
    pub fn new(params: &ParamStore, config_hash: [u8; 32], step: usize) -> Self {
        Self { params: params.round_to_f32(), config_hash, step }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&self.config_hash);
        payload.extend_from_slice(&(self.params.len() as u32 + 1).to_le_bytes());
        let step = Matrix::filled(1, 1, self.step as f64);
        for (name, m) in self.params.iter().chain(std::iter::once((STEP_TENSOR, &step))) {
            payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            payload.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    /// Parses bytes, checking magic, version, checksum and (when given) the
    /// expected config hash, in that order.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<&[u8; 32]>) -> std::result::Result<Self, SnapshotError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 4 {
            return Err(SnapshotError::Truncated("version"));
        }
        let version = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(SnapshotError::Version { found: version, expected: FORMAT_VERSION });
        }
        let rest = &rest[4..];
        if rest.len() < 32 + 4 + 4 {
            return Err(SnapshotError::Truncated("header"));
        }
        let (payload, crc) = rest.split_at(rest.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(SnapshotError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: payload };
        let hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
        if let Some(expected) = expected_hash {
            if &hash != expected {
                return Err(SnapshotError::ConfigHash);
            }
        }
        let count = r.u32("tensor count")?;
        let mut params = ParamStore::new();
        let mut step = None;
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| SnapshotError::Malformed("tensor name is not utf-8".into()))?
                .to_string();
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let raw = r.take(rows * cols * 4, "tensor data")?;
            let data: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            let m = Matrix::new(rows, cols, data).map_err(|e| SnapshotError::Malformed(format!("{name}: {e}")))?;
            if name == STEP_TENSOR {
                step = Some(m.get(0, 0) as usize);
            } else {
                params.insert(name, m);
            }
        }
        if !r.buf.is_empty() {
            return Err(SnapshotError::Malformed(format!("{} trailing bytes", r.buf.len())));
        }
        let step = step.ok_or_else(|| SnapshotError::Malformed("missing step tensor".into()))?;
        Ok(Self { params, config_hash: hash, step })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], SnapshotError> {
        if self.buf.len() < n {
            return Err(SnapshotError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Writes to a temporary sibling then renames over `path`.
pub fn save_snapshot(snapshot: &ModelSnapshot, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(SnapshotError::Io)?;
        f.write_all(&snapshot.to_bytes()).map_err(SnapshotError::Io)?;
        f.sync_all().map_err(SnapshotError::Io)?;
    }
    fs::rename(&tmp, path).map_err(SnapshotError::Io)?;
    Ok(())
}

pub fn load_snapshot(path: &Path, expected_hash: Option<&[u8; 32]>) -> Result<ModelSnapshot> {
    let bytes = fs::read(path).map_err(SnapshotError::Io)?;
    Ok(ModelSnapshot::from_bytes(&bytes, expected_hash)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelSnapshot {
        let mut p = ParamStore::new();
        p.insert("a.w", Matrix::from_rows(&[&[0.1, -2.5], &[3.25, 1e-3]]));
        p.insert("b", Matrix::filled(1, 3, 0.7));
        ModelSnapshot::new(&p, [7; 32], 3)
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample();
        let back = ModelSnapshot::from_bytes(&s.to_bytes(), Some(&[7; 32])).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.step, 3);
        assert_eq!(back.params().get("a.w").unwrap().get(0, 0), 0.1f32 as f64);
    }

    #[test]
    fn error_classes() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelSnapshot::from_bytes(&bad, None), Err(SnapshotError::BadMagic)));
        let mut v0 = bytes.clone();
        v0[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(ModelSnapshot::from_bytes(&v0, None), Err(SnapshotError::Version { found: 0, expected: 1 })));
        let mut flipped = bytes.clone();
        flipped[60] ^= 0x40;
        assert!(matches!(ModelSnapshot::from_bytes(&flipped, None), Err(SnapshotError::Checksum { .. })));
        assert!(matches!(ModelSnapshot::from_bytes(&bytes[..30], None), Err(SnapshotError::Truncated(_))));
        assert!(matches!(ModelSnapshot::from_bytes(&bytes, Some(&[8; 32])), Err(SnapshotError::ConfigHash)));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step1.snap");
        save_snapshot(&sample(), &path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        assert_eq!(load_snapshot(&path, None).unwrap(), sample());
    }
}

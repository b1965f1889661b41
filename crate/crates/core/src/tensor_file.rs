//! The `PNCL` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | offset        | size        | field                                  |
//! |---------------|-------------|----------------------------------------|
//! | 0             | 4           | magic `b"PNCL"`                        |
//! | 4             | 4 (u32)     | version, currently 1                   |
//! | 8             | 4 (u32)     | dtype code: 1 = f32, 2 = u32           |
//! | 12            | 4 (u32)     | rank `r`                               |
//! | 16            | 8·r (u64)   | dims, outermost first                  |
//! | 16 + 8r       | 4 (u32)     | sidecar length `s` in bytes (0 = none) |
//! | 20 + 8r       | s           | UTF-8 JSON sidecar                     |
//! | 20 + 8r + s   | 4·∏dims     | row-major payload                      |
//! | end − 4       | 4 (u32)     | CRC-32 (IEEE) of every preceding byte  |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PNCL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 1,
    U32 = 2,
}

impl DType {
    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor plus an optional JSON provenance sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    dims: Vec<usize>,
    data: TensorData,
    pub sidecar: Option<Value>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor payload elements", expected, data.len()));
        }
        Ok(Self {
            dims,
            data,
            sidecar: None,
        })
    }

    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn u32(dims: Vec<usize>, values: Vec<u32>) -> Result<Self> {
        Self::new(dims, TensorData::U32(values))
    }

    pub fn with_sidecar(mut self, sidecar: Value) -> Self {
        self.sidecar = Some(sidecar);
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U32(_) => None,
        }
    }

    pub fn as_u32(&self) -> Option<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Check the rank and every dim given as `Some`.
    pub fn expect_shape(&self, context: &'static str, shape: &[Option<usize>]) -> Result<()> {
        if self.dims.len() != shape.len() {
            return Err(Error::dim(context, shape.len(), self.dims.len()));
        }
        for (&got, want) in self.dims.iter().zip(shape) {
            if let Some(want) = *want {
                if got != want {
                    return Err(Error::dim(context, want, got));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let sidecar = match &self.sidecar {
            Some(v) => serde_json::to_vec(v)?,
            None => Vec::new(),
        };
        let mut out = Vec::with_capacity(24 + 8 * self.dims.len() + sidecar.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dtype() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(sidecar.len() as u32).to_le_bytes());
        out.extend_from_slice(&sidecar);
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parse a container; `path` only labels diagnostics.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.fail(0, format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        let code = r.u32("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| r.fail(8, format!("unknown dtype code {code}")))?;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            let d = r.u64("dim")?;
            dims.push(usize::try_from(d).map_err(|_| r.fail(r.pos as u64 - 8, format!("dim {d} overflows")))?);
        }
        let sidecar_len = r.u32("sidecar length")? as usize;
        let sidecar_at = r.pos as u64;
        let sidecar_bytes = r.take(sidecar_len, "sidecar")?;
        let sidecar = if sidecar_len == 0 {
            None
        } else {
            Some(
                serde_json::from_slice(sidecar_bytes)
                    .map_err(|e| r.fail(sidecar_at, format!("sidecar is not valid JSON: {e}")))?,
            )
        };

        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.fail(16, "element count overflows".into()))?;
        let payload_len = count
            .checked_mul(4)
            .ok_or_else(|| r.fail(16, "payload size overflows".into()))?;
        let expected_total = r.pos + payload_len + 4;
        if bytes.len() != expected_total {
            return Err(r.fail(
                r.pos as u64,
                format!(
                    "file length {} does not match header: expected {} bytes ({} payload + 4 checksum after byte {})",
                    bytes.len(),
                    expected_total,
                    payload_len,
                    r.pos
                ),
            ));
        }
        let payload = r.take(payload_len, "payload")?;
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }

        let words = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let data = match dtype {
            DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            DType::U32 => TensorData::U32(words.map(u32::from_le_bytes).collect()),
        };
        Ok(Self {
            dims,
            data,
            sidecar,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: u64, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: expected {n} bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    TensorFile::from_bytes(&bytes, path)
}

/// Write via a temporary sibling file and rename, so readers never observe a
/// partial container.
pub fn write_tensor(tensor: &TensorFile, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &tensor.to_bytes()?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn round_trip_f32_3x5() {
        let values: Vec<f32> = (0..15).map(|i| i as f32 * 0.37 - 2.0).collect();
        let t = TensorFile::f32(vec![3, 5], values).unwrap().with_sidecar(json!({"ids": ["a", "b", "c"]}));
        let bytes = t.to_bytes().unwrap();
        let back = TensorFile::from_bytes(&bytes, p()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = TensorFile::u32(vec![2], vec![7, 9]).unwrap();
        let b = t.to_bytes().unwrap();
        assert_eq!(&b[0..4], b"PNCL");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..24], &2u64.to_le_bytes());
        assert_eq!(&b[24..28], &0u32.to_le_bytes());
        assert_eq!(&b[28..32], &7u32.to_le_bytes());
        assert_eq!(&b[32..36], &9u32.to_le_bytes());
        assert_eq!(b.len(), 40);
        assert_eq!(&b[36..40], &crc32fast::hash(&b[..36]).to_le_bytes());
    }

    #[test]
    fn truncated_file_names_lengths() {
        let b = TensorFile::f32(vec![3, 5], vec![0.5; 15]).unwrap().to_bytes().unwrap();
        let err = TensorFile::from_bytes(&b[..b.len() - 7], p()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { .. }), "{msg}");
        assert!(msg.contains(&format!("{}", b.len() - 7)) && msg.contains(&format!("{}", b.len())), "{msg}");
        assert!(TensorFile::from_bytes(&b[..10], p()).is_err());
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut b = TensorFile::f32(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap().to_bytes().unwrap();
        b[30] ^= 0x40;
        assert!(matches!(TensorFile::from_bytes(&b, p()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn bad_magic_version_dtype() {
        let good = TensorFile::u32(vec![1], vec![1]).unwrap().to_bytes().unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&b, p()), Err(Error::Format { offset: 0, .. })));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(TensorFile::from_bytes(&b, p()), Err(Error::Format { offset: 4, .. })));
        let mut b = good;
        b[8] = 7;
        assert!(matches!(TensorFile::from_bytes(&b, p()), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn write_then_read_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pncl");
        let t = TensorFile::u32(vec![2, 2], vec![1, 2, 3, 4]).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn payload_mismatch_rejected() {
        assert!(TensorFile::f32(vec![2, 3], vec![0.0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn payload_bytes_round_trip(
            dims in proptest::collection::vec(1usize..5, 0..4),
            bits in proptest::collection::vec(any::<u32>(), 256),
            as_float in any::<bool>(),
        ) {
            let n: usize = dims.iter().product();
            let words = bits[..n].to_vec();
            let t = if as_float {
                TensorFile::f32(dims.clone(), words.iter().map(|&w| f32::from_bits(w)).collect()).unwrap()
            } else {
                TensorFile::u32(dims.clone(), words.clone()).unwrap()
            };
            let bytes = t.to_bytes().unwrap();
            let back = TensorFile::from_bytes(&bytes, p()).unwrap();
            prop_assert_eq!(back.dims(), &dims[..]);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            let back_words: Vec<u32> = match back.data() {
                TensorData::F32(v) => v.iter().map(|x| x.to_bits()).collect(),
                TensorData::U32(v) => v.clone(),
            };
            prop_assert_eq!(back_words, words);
        }
    }
}

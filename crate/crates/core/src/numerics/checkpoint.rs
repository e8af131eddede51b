//! Flat container of named `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   12 bytes magic "PERMDEC-ARR\0" + u32 format version
//! entry*   u64 name length, name bytes (UTF-8), u64 rank,
//!          rank × u64 dimensions, product(dims) × f32 values
//! ```
//!
//! Entries run to end of file.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 12] = b"PERMDEC-ARR\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 || &bytes[..12] != MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let mut r = Reader { buf: bytes, pos: 16 };
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Parse(format!("array name: {e}")))?
            .to_string();
        let rank = r.u64()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Parse(format!("{name}: bad rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(dims, data)?));
    }
    Ok(entries)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    write_atomic(path, &encode(entries))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("w".into(), Tensor::from_rows(&[vec![1.0f32, 2.0]]))]);
        assert_eq!(&bytes[..12], MAGIC);
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(bytes[24], b'w');
        assert_eq!(&bytes[25..33], &2u64.to_le_bytes());
        assert_eq!(&bytes[33..41], &1u64.to_le_bytes());
        assert_eq!(&bytes[41..49], &2u64.to_le_bytes());
        assert_eq!(&bytes[49..53], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 57);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"nope").is_err());
        let mut bytes = encode(&[("w".into(), Tensor::from_rows(&[vec![1.0f32, 2.0]]))]);
        bytes.truncate(bytes.len() - 1);
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(names in proptest::collection::vec("[a-z.]{1,12}", 1..4),
                      rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = crate::numerics::RngStream::new(seed);
            let entries: Vec<(String, Tensor<f32>)> = names
                .into_iter()
                .map(|n| (n, crate::numerics::init_normal(&[rows, cols], 1.0, &mut rng)))
                .collect();
            let back = decode(&encode(&entries)).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}

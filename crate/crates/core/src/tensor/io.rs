//! Flat binary tensor container.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! "WNT1"                          4-byte magic
//! meta_len, meta bytes            UTF-8 metadata (JSON or empty)
//! entry_count
//! per entry:
//!   name_len, name bytes          UTF-8 parameter name
//!   dtype                         u8: 1 = f32, 2 = f64
//!   rank, extents[rank]
//!   values                        row-major, little-endian
//! ```

use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WNT1";

/// Decoded container: metadata string plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile<T> {
    pub meta: String,
    pub entries: Vec<(String, Tensor<T>)>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<'a, T: Real>(
    meta: &str,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, meta.len() as u64);
    out.extend_from_slice(meta.as_bytes());
    put_u64(&mut out, entries.len() as u64);
    for (name, t) in entries {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        put_u64(&mut out, t.rank() as u64);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        out.reserve(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.to_le_bytes_into(&mut out);
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} too large")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Decodes a container, converting every entry to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<TensorFile<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected WNT1".into()));
    }
    let meta = r.string()?;
    let count = r.len()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Format(format!("unknown dtype code {code} for `{name}`")))?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("extent overflow for `{name}`")))?;
        let raw = r.take(numel * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::from_le_slice(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::from_le_slice(c))).collect(),
        };
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(TensorFile { meta, entries })
}

pub fn save<'a, T: Real>(
    path: &Path,
    meta: &str,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    std::fs::write(path, encode(meta, entries)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<TensorFile<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode("", [("w", &t)]);
        assert_eq!(&bytes[..4], b"WNT1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 0);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1);
        // name_len, name, dtype
        assert_eq!(bytes[20..28], 1u64.to_le_bytes());
        assert_eq!(bytes[28], b'w');
        assert_eq!(bytes[29], 1);
        assert_eq!(bytes.len(), 29 + 1 + 8 + 8 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let bytes = encode("m", [("x", &t)]);
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, (0..n).map(|i| (i as f64 + seed as f64).sin()).collect::<Vec<f64>>()).unwrap();
            let f = decode::<f64>(&encode("{\"k\":1}", [("a.b", &t)])).unwrap();
            prop_assert_eq!(f.meta, "{\"k\":1}");
            prop_assert_eq!(&f.entries[0].1, &t);
        }
    }
}

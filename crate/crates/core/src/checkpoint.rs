//! Binary checkpoint format for named parameter tensors.
//!
//! ```text
//! "PCKPT"            5 bytes
//! version            u32 LE (1)
//! count              u32 LE
//! per tensor:
//!   name length      u32 LE, then UTF-8 name bytes
//!   rank             u32 LE
//!   extents          rank × u32 LE
//!   data             product(extents) × f64 LE, row-major
//! ```
//!
//! Tensors are written in name order, so equal stores give equal files.

use std::fs;
use std::path::Path;

use crate::binio::{put_u32, to_u32, Cursor};
use crate::error::{Error, FormatError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PCKPT";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(store.len(), "tensor count")?);
    for (name, t) in store.iter() {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(t.rank(), "rank")?);
        for &e in t.shape() {
            put_u32(&mut out, to_u32(e, "extent")?);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor::new(bytes);
    c.magic(MAGIC)?;
    let version = c.u32()?;
    if version != VERSION {
        return Err(FormatError::Version {
            expected: VERSION,
            found: version,
        }
        .into());
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| FormatError::InvalidName(e.to_string()))?
            .to_string();
        if name.is_empty() {
            return Err(FormatError::InvalidName("empty name".into()).into());
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape.contains(&0) {
            return Err(FormatError::InvalidHeader(format!("`{name}` has a zero extent")).into());
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| FormatError::InvalidHeader(format!("`{name}` is too large")))?;
        let data = c.f64s(numel)?;
        if store.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(FormatError::InvalidName(format!("duplicate `{name}`")).into());
        }
    }
    c.finish()?;
    Ok(store)
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::new([2], vec![1.5, -0.0]).unwrap());
        s.insert("a.w", Tensor::new([1, 3], vec![f64::MIN_POSITIVE, 1e300, -7.25]).unwrap());
        s.insert("s", Tensor::scalar(3.0));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let bytes = encode(&store()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        for ((n1, t1), (n2, t2)) in store().iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn corrupted_headers_are_typed() {
        let bytes = encode(&store()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(
            decode(&bad),
            Err(Error::Format(FormatError::Version { found: 9, .. }))
        ));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(Error::Format(FormatError::TrailingBytes(1)))));
        assert!(matches!(decode(b"PC"), Err(Error::Format(FormatError::Truncated { .. }))));
        assert!(matches!(decode(b""), Err(Error::Format(FormatError::Truncated { .. }))));
    }
}

//! TDS: a minimal tensor-dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        b"LLDD"
//! version      u32        (currently 1)
//! entry count  u32
//! per entry:
//!   name len   u16, then UTF-8 name bytes
//!   dtype      u8         (1 = f32, 2 = f64)
//!   rank       u8
//!   dims       u64 × rank
//!   values     row-major, little-endian, product(dims) × dtype size
//! ```
//!
//! The payload must end exactly after the last entry.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"LLDD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TdsTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TdsTensor {
    pub fn dtype(&self) -> DType {
        match self {
            TdsTensor::F32(_) => DType::F32,
            TdsTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TdsTensor::F32(t) => t.shape(),
            TdsTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        match self {
            TdsTensor::F32(t) => t.cast(),
            TdsTensor::F64(t) => t.cast(),
        }
    }
}

impl<T: Element> From<Tensor<T>> for TdsTensor {
    fn from(t: Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TdsTensor::F32(t.cast()),
            DType::F64 => TdsTensor::F64(t.cast()),
        }
    }
}

/// Ordered, uniquely named tensor entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TdsContainer {
    entries: Vec<(String, TdsTensor)>,
}

impl TdsContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: impl Into<TdsTensor>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name too long ({} bytes)", name.len())));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate entry {name:?}")));
        }
        self.entries.push((name, tensor.into()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TdsTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entry `name` converted to `T`, or a format error if absent.
    pub fn require<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(TdsTensor::to_tensor)
            .ok_or_else(|| Error::Format(format!("missing entry {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.dtype().code(), t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match t {
                TdsTensor::F32(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                TdsTensor::F64(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut out = TdsContainer::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_owned();
            let [code, rank] = r.array::<2>()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
            if rank == 0 {
                return Err(Error::Format(format!("entry {name:?} has rank 0")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.array()?);
                dims.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Format(format!("entry {name:?} has invalid dims {dims:?}")))?;
            let byte_len = n
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format("payload size overflow".into()))?;
            let raw = r.take(byte_len)?;
            let tensor = match dtype {
                DType::F32 => TdsTensor::F32(Tensor::new(
                    dims,
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )?),
                DType::F64 => TdsTensor::F64(Tensor::new(
                    dims,
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )?),
            };
            out.insert(name, tensor)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(out)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_byte_layout() {
        let mut c = TdsContainer::new();
        c.insert("a", Tensor::<f32>::from_f64(vec![2], &[1.0, -2.5]).unwrap())
            .unwrap();
        let bytes = c.to_bytes();
        let mut want = b"LLDD".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u16.to_le_bytes());
        want.push(b'a');
        want.extend([1u8, 1u8]);
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_malformed_input() {
        let mut c = TdsContainer::new();
        c.insert("x", Tensor::<f64>::ones(vec![3, 2])).unwrap();
        let good = c.to_bytes();
        assert!(TdsContainer::from_bytes(&good[..good.len() - 1]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(TdsContainer::from_bytes(&trailing).is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(TdsContainer::from_bytes(&bad_magic).is_err());
        let mut bad_dtype = good.clone();
        bad_dtype[4 + 4 + 4 + 2 + 1] = 9;
        assert!(TdsContainer::from_bytes(&bad_dtype).is_err());
        assert!(c.insert("x", Tensor::<f64>::ones(vec![1])).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            a in proptest::collection::vec(any::<f32>(), 1..40),
            b in proptest::collection::vec(any::<f64>(), 1..40),
        ) {
            let mut c = TdsContainer::new();
            let na = a.len();
            c.insert("f32", Tensor::new(vec![na], a.clone()).unwrap()).unwrap();
            c.insert("f64", Tensor::new(vec![1, b.len()], b.clone()).unwrap()).unwrap();
            let back = TdsContainer::from_bytes(&c.to_bytes()).unwrap();
            let TdsTensor::F32(ta) = back.get("f32").unwrap() else { panic!() };
            let TdsTensor::F64(tb) = back.get("f64").unwrap() else { panic!() };
            prop_assert!(ta.data().iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(tb.data().iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }
}

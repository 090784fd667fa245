//! Minimal binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"EQMP"
//! version  u16            (currently 1)
//! count    u32            number of entries
//! entry*   name_len u32, name (UTF-8), dtype u8 (0 f32, 1 u8, 2 i32),
//!          rank u8, dims u32 x rank, payload (row-major)
//! ```
//!
//! Entry names are unique; order is preserved, so writing the same entries
//! twice yields identical bytes.

use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const MAGIC: &[u8; 4] = b"EQMP";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
            TensorData::I32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U8(_) => "u8",
            TensorData::I32(_) => "i32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: TensorData) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(invalid(format!("duplicate container entry '{name}'")));
        }
        if dims.len() > u8::MAX as usize {
            return Err(invalid("tensor rank too large"));
        }
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(invalid(format!(
                "entry '{name}': dims {:?} hold {count} values but payload has {}",
                dims,
                data.len()
            )));
        }
        let dims = dims
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| invalid("dimension exceeds u32")))
            .collect::<Result<_>>()?;
        self.entries.push(Entry { name, dims, data });
        Ok(())
    }

    pub fn push_f32(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Result<()> {
        self.push(name, dims, TensorData::F32(data))
    }

    pub fn push_u8(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<u8>) -> Result<()> {
        self.push(name, dims, TensorData::U8(data))
    }

    pub fn push_i32(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<i32>) -> Result<()> {
        self.push(name, dims, TensorData::I32(data))
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("container has no entry '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn f32(&self, name: &str) -> Result<(Vec<usize>, &[f32])> {
        let e = self.get(name)?;
        match &e.data {
            TensorData::F32(v) => Ok((e.dims.iter().map(|&d| d as usize).collect(), v)),
            other => Err(Error::Format(format!("entry '{name}' is {}, expected f32", other.type_name()))),
        }
    }

    pub fn u8(&self, name: &str) -> Result<(Vec<usize>, &[u8])> {
        let e = self.get(name)?;
        match &e.data {
            TensorData::U8(v) => Ok((e.dims.iter().map(|&d| d as usize).collect(), v)),
            other => Err(Error::Format(format!("entry '{name}' is {}, expected u8", other.type_name()))),
        }
    }

    pub fn i32(&self, name: &str) -> Result<(Vec<usize>, &[i32])> {
        let e = self.get(name)?;
        match &e.data {
            TensorData::I32(v) => Ok((e.dims.iter().map(|&d| d as usize).collect(), v)),
            other => Err(Error::Format(format!("entry '{name}' is {}, expected i32", other.type_name()))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.code());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an EQMP container".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format("entry size overflows".into()))?;
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::U8(r.take(n)?.to_vec()),
                2 => TensorData::I32(
                    r.take(n.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?
                        .chunks_exact(4)
                        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Format(format!("unknown dtype code {other} in '{name}'"))),
            };
            c.push(name, &dims, data).map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("container truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let mut c = Container::new();
        c.push_u8("m", &[2], vec![7, 9]).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"EQMP");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[1, 0, 0, 0]);
        assert_eq!(&b[10..14], &[1, 0, 0, 0]);
        assert_eq!(b[14], b'm');
        assert_eq!(&b[15..17], &[1, 1]);
        assert_eq!(&b[17..21], &[2, 0, 0, 0]);
        assert_eq!(&b[21..], &[7, 9]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = Container::new();
        assert!(c.push_f32("a", &[2, 2], vec![0.0; 3]).is_err());
        c.push_f32("a", &[1], vec![0.0]).unwrap();
        assert!(c.push_u8("a", &[1], vec![0]).is_err());
        assert!(Container::from_bytes(b"NOPE").is_err());
        let mut b = c.to_bytes();
        b.pop();
        assert!(Container::from_bytes(&b).is_err());
        assert!(c.u8("a").is_err());
        assert!(c.get("zzz").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            f in proptest::collection::vec(any::<f32>(), 0..40),
            u in proptest::collection::vec(any::<u8>(), 0..40),
            i in proptest::collection::vec(any::<i32>(), 1..40),
        ) {
            let mut c = Container::new();
            c.push_f32("floats", &[f.len()], f.clone()).unwrap();
            c.push_u8("bytes", &[1, u.len()], u).unwrap();
            c.push_i32("ints", &[i.len(), 1], i).unwrap();
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            let (_, fb) = back.f32("floats").unwrap();
            prop_assert!(fb.iter().zip(&f).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

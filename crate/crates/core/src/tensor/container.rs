//! Flat binary container of named `f32` arrays.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "TKPC" version meta_len meta_utf8 count
//!   { name_len name_utf8 ndim dim_0 .. dim_{ndim-1} value_0 .. value_{n-1} }*count
//! ```
//!
//! Values are IEEE-754 `f32`, little-endian. The metadata block is free-form
//! UTF-8 text.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TKPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: String,
    pub arrays: Vec<NamedArray>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid utf-8 string"))
    }
}

impl Container {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            arrays: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            values: tensor.data().iter().map(|v| v.f64() as f32).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn from_params<T: Real>(params: &ParamStore<T>, meta: impl Into<String>) -> Self {
        let mut c = Self::new(meta);
        for (_, p) in params.iter() {
            c.push(&p.name, &p.value);
        }
        c
    }

    /// Overwrites every parameter of `params` from the array of the same name.
    pub fn load_into<T: Real>(&self, params: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let arr = self.get(&name).ok_or_else(|| bad(format!("missing array {name}")))?;
            let t = Tensor::new(&arr.shape, arr.values.iter().map(|&v| T::of(v as f64)).collect())?;
            params.assign(&name, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(MAGIC);
        put(&mut out, VERSION);
        put(&mut out, self.meta.len() as u32);
        out.extend_from_slice(self.meta.as_bytes());
        put(&mut out, self.arrays.len() as u32);
        for a in &self.arrays {
            put(&mut out, a.name.len() as u32);
            out.extend_from_slice(a.name.as_bytes());
            put(&mut out, a.shape.len() as u32);
            for &d in &a.shape {
                put(&mut out, d as u32);
            }
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta = c.string()?;
        let count = c.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = c.string()?;
            let ndim = c.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| c.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = c.take(n.checked_mul(4).ok_or_else(|| bad("array too large"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            arrays.push(NamedArray { name, shape, values });
        }
        if c.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"nope").is_err());
        let mut bytes = Container::new("m").to_bytes();
        bytes.push(0);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            meta in "[a-z=\n ]{0,40}",
            arrays in prop::collection::vec(
                ("[a-z/]{1,12}", prop::collection::vec(-1e6f32..1e6, 1..20)), 0..5)
        ) {
            let mut c = Container::new(meta);
            for (name, vals) in arrays {
                let n = vals.len();
                c.push(name, &Tensor::new(&[n], vals).unwrap());
            }
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}

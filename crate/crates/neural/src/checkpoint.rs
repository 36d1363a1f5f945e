//! Versioned binary container for named `f32` arrays plus a text metadata block.
//!
//! ```text
//! magic    8 bytes  "FGCKPT\r\n"
//! version  u32 LE
//! meta     u32 LE byte length, then UTF-8 text
//! count    u32 LE number of arrays
//! array    u32 LE name length, name bytes, u32 LE rank, rank x u64 LE dims,
//!          product(dims) x f32 LE
//! ```

use std::io::{Read, Write};

use crate::error::{NeuralError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FGCKPT\r\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub arrays: Vec<NamedArray>,
}

fn bad(msg: impl Into<String>) -> NeuralError {
    NeuralError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| bad(format!("{what} too large")))
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            arrays: Vec::new(),
        }
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect(),
        });
    }

    pub fn push_params<S: Scalar>(&mut self, prefix: &str, params: &ParamStore<S>) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let a = self
            .get(name)
            .ok_or_else(|| bad(format!("missing array `{name}`")))?;
        Tensor::new(
            &a.shape,
            a.data.iter().map(|&x| S::from_f32(x).unwrap()).collect(),
        )
    }

    /// Overwrites every parameter of `params` from arrays named `prefix + name`.
    pub fn load_params<S: Scalar>(&self, prefix: &str, params: &mut ParamStore<S>) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let t = self.tensor(&format!("{prefix}{n}"))?;
            params.set(&n, t)?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = self.metadata.as_bytes();
        w.write_all(&len_u32(meta.len(), "metadata")?.to_le_bytes())?;
        w.write_all(meta)?;
        w.write_all(&len_u32(self.arrays.len(), "array count")?.to_le_bytes())?;
        for a in &self.arrays {
            let expected: usize = a.shape.iter().product();
            if expected != a.data.len() {
                return Err(bad(format!("array {} has inconsistent shape", a.name)));
            }
            w.write_all(&len_u32(a.name.len(), "name")?.to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            w.write_all(&len_u32(a.shape.len(), "rank")?.to_le_bytes())?;
            for &d in &a.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * a.data.len());
            for x in &a.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;
        let count = read_u32(r)? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        Ok(Self { metadata, arrays })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write_to(&mut v)?;
        Ok(v)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0").is_err());
        let mut bytes = Checkpoint::new("{}").to_bytes().unwrap();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn special_values_survive() {
        let mut c = Checkpoint::new("meta");
        c.arrays.push(NamedArray {
            name: "x".into(),
            shape: vec![4],
            data: vec![-0.0, f32::MIN_POSITIVE, f32::MAX, 1e-45],
        });
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.arrays[0].data), bits(&c.arrays[0].data));
    }
}

//! Self-describing named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SIVTARCH"
//! version    u32
//! n_texts    u32
//!   name     u32 length + UTF-8 bytes
//!   body     u64 length + UTF-8 bytes
//! n_tensors  u32
//!   name     u32 length + UTF-8 bytes
//!   dtype    u8       (0 = f64)
//!   ndim     u32
//!   dims     ndim × u64
//!   values   product(dims) × f64
//! ```
//!
//! Entries are stored in lexicographic name order so identical contents
//! always produce identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Result, SivtError};

pub const MAGIC: &[u8; 8] = b"SIVTARCH";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub texts: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_text(&mut self, name: impl Into<String>, body: impl Into<String>) {
        self.texts.insert(name.into(), body.into());
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        self.texts
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| SivtError::Checkpoint(format!("missing text section `{name}`")))
    }

    /// Fetch a tensor and check its shape.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<&ArrayD<f64>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| SivtError::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(SivtError::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.texts.len() as u32)?;
        for (name, body) in &self.texts {
            write_name(&mut w, name)?;
            w.write_u64::<LittleEndian>(body.len() as u64)?;
            w.write_all(body.as_bytes())?;
        }
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_name(&mut w, name)?;
            w.write_u8(DTYPE_F64)?;
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: std::io::Error| SivtError::Checkpoint(format!("truncated archive: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(SivtError::Checkpoint("not a tensor archive (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != FORMAT_VERSION {
            return Err(SivtError::Checkpoint(format!(
                "unsupported archive version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut archive = TensorArchive::new();
        let n_texts = r.read_u32::<LittleEndian>().map_err(bad)?;
        for _ in 0..n_texts {
            let name = read_name(&mut r)?;
            let len = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(bad)?;
            let body = String::from_utf8(buf)
                .map_err(|_| SivtError::Checkpoint(format!("text `{name}` is not UTF-8")))?;
            archive.texts.insert(name, body);
        }
        let n_tensors = r.read_u32::<LittleEndian>().map_err(bad)?;
        for _ in 0..n_tensors {
            let name = read_name(&mut r)?;
            let dtype = r.read_u8().map_err(bad)?;
            if dtype != DTYPE_F64 {
                return Err(SivtError::Checkpoint(format!(
                    "tensor `{name}` has unsupported dtype {dtype}"
                )));
            }
            let ndim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u64::<LittleEndian>().map_err(bad)? as usize);
            }
            let count: usize = dims.iter().product();
            let mut values = vec![0.0; count];
            r.read_f64_into::<LittleEndian>(&mut values).map_err(bad)?;
            let t = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| SivtError::Checkpoint(format!("tensor `{name}`: {e}")))?;
            archive.tensors.insert(name, t);
        }
        Ok(archive)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SivtError::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| SivtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| SivtError::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let bad = |e: std::io::Error| SivtError::Checkpoint(format!("truncated archive: {e}"));
    let len = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(bad)?;
    String::from_utf8(buf).map_err(|_| SivtError::Checkpoint("tensor name is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), text in "[a-z =\n]{0,30}") {
            let n = values.len();
            let mut a = TensorArchive::new();
            a.insert_text("config", text);
            a.insert("w", ArrayD::from_shape_vec(IxDyn(&[n]), values).unwrap());
            a.insert("s", ArrayD::from_elem(IxDyn(&[]), 3.5));
            let back = TensorArchive::read_from(&a.to_bytes()[..]).unwrap();
            prop_assert_eq!(back, a);
        }
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let mut a = TensorArchive::new();
        a.insert("w", ArrayD::zeros(IxDyn(&[2, 3])));
        let mut bytes = a.to_bytes();
        assert!(a.tensor("w", &[3, 2]).is_err());
        bytes[8] = 9;
        let err = TensorArchive::read_from(&bytes[..]).unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(TensorArchive::read_from(&b"garbage!"[..]).is_err());
    }
}

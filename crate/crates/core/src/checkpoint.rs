//! Tensor archive: a flat list of named row-major `f32` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"KGTA"
//! version u32 = 1
//! count   u32
//! count × { name_len u32 | name utf-8 | ndim u32 | dims u64 × ndim | values f32 × Π dims }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::{cst, Float, Mat};

const MAGIC: &[u8; 4] = b"KGTA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<F: Float>(&mut self, name: &str, m: &Mat<F>) {
        let values = m.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        self.tensors.insert(
            name.to_string(),
            StoredTensor {
                shape: vec![m.nrows(), m.ncols()],
                values,
            },
        );
    }

    pub fn get<F: Float>(&self, name: &str) -> Result<Mat<F>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let (r, c) = match t.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => return Err(Error::Checkpoint(format!("{name}: unsupported shape {other:?}"))),
        };
        Array2::from_shape_vec((r, c), t.values.iter().map(|&v| cst::<F>(v as f64)).collect())
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    /// Loads `name` and checks it has exactly the expected shape.
    pub fn get_shaped<F: Float>(&self, name: &str, shape: (usize, usize)) -> Result<Mat<F>> {
        let m = self.get(name)?;
        if m.dim() != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: expected shape {shape:?}, found {:?}",
                m.dim()
            )));
        }
        Ok(m)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Merges all entries of `other`, overwriting duplicates.
    pub fn extend(&mut self, other: TensorArchive) {
        self.tensors.extend(other.tensors);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, StoredTensor { shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
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
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(entries in proptest::collection::btree_map(
            "[a-z.]{1,12}",
            (1usize..4, 1usize..5).prop_flat_map(|(r, c)| (Just((r, c)), proptest::collection::vec(-1e3f32..1e3, r * c))),
            0..5,
        )) {
            let mut a = TensorArchive::new();
            for (name, ((r, c), vals)) in &entries {
                a.insert(name, &Array2::from_shape_vec((*r, *c), vals.clone()).unwrap());
            }
            let back = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(&back, &a);
        }
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let mut a = TensorArchive::new();
        a.insert("w", &Array2::<f32>::ones((2, 2)));
        let bytes = a.to_bytes();
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TensorArchive::from_bytes(b"nope").is_err());
    }

    #[test]
    fn shape_is_checked() {
        let mut a = TensorArchive::new();
        a.insert("w", &Array2::<f64>::zeros((2, 3)));
        assert!(a.get_shaped::<f64>("w", (3, 2)).is_err());
        assert_eq!(a.get_shaped::<f64>("w", (2, 3)).unwrap().dim(), (2, 3));
    }
}

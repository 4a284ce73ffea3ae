//! Named parameter storage, graph binding, and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    b"MEDSTCKP"
//! version  u32
//! meta     u32 length + UTF-8 JSON (model configuration)
//! count    u32
//! repeated count times:
//!   name   u32 length + UTF-8
//!   rows   u32
//!   cols   u32
//!   data   rows*cols f64 (IEEE-754 bits, row-major)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Mat, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEDSTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

/// Parameters registered on one [`Graph`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    pub fn normal<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.insert(name, m)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Mat::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Mat::ones((rows, cols)))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.values.iter().map(|m| g.leaf(m.clone())).collect() }
    }

    /// Collects gradients in store order; unused parameters get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Mat> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(m, &v)| grads.get_or_zeros(v, m))
            .collect()
    }

    pub fn write_to<W: Write>(&self, meta: &str, w: &mut W) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_str(w, meta)?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, m) in self.names.iter().zip(&self.values) {
            write_str(w, name)?;
            w.write_all(&(m.nrows() as u32).to_le_bytes())?;
            w.write_all(&(m.ncols() as u32).to_le_bytes())?;
            for v in m.iter() {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self, meta: &str) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(meta, &mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parses a checkpoint, returning the metadata string and the store.
    pub fn from_bytes(bytes: &[u8]) -> Result<(String, ParamStore)> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta = read_str(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
                data.push(f64::from_bits(u64::from_le_bytes(b)));
            }
            let m = Mat::from_shape_vec((rows, cols), data).expect("shape matches data length");
            if store.index.contains_key(&name) {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            store.insert(&name, m);
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok((meta, store))
    }

    pub fn save(&self, meta: &str, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(String, ParamStore)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated integer".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let n = read_u32(r)? as usize;
    if r.len() < n {
        return Err(Error::Checkpoint("truncated string".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    String::from_utf8(head.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

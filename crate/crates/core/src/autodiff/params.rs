//! Named parameter arrays, gradient accumulators and the checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes   "SPCKPT01"
//! seed        u64
//! iteration   u64
//! count       u32
//! count × {
//!     name_len  u32
//!     name      name_len bytes, UTF-8
//!     rows      u32
//!     cols      u32
//!     payload   rows·cols f64, row-major
//! }
//! ```

use std::path::Path;
use std::sync::Arc;

use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Matrix>,
    pub grad: Matrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    pub seed: u64,
    pub iteration: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            seed,
            iteration: 0,
        }
    }

    /// Registers a parameter and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let grad = Matrix::zeros(value.raw_dim());
        self.params.push(Parameter {
            name: name.into(),
            value: Arc::new(value),
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, slot: usize) -> &Parameter {
        &self.params[slot]
    }

    pub fn value(&self, slot: usize) -> &Matrix {
        &self.params[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Matrix {
        Arc::make_mut(&mut self.params[slot].value)
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.var_shared(p.value.clone()))
            .collect()
    }

    /// Adds `grads` (one per slot, in order) into the accumulators.
    pub fn accumulate(&mut self, grads: &[Matrix]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Autodiff(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if p.grad.raw_dim() != g.raw_dim() {
                return Err(Error::Autodiff(format!(
                    "gradient shape {:?} does not match parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.grad.shape()
                )));
            }
            p.grad += g;
        }
        Ok(())
    }

    pub fn grads(&self) -> Vec<&Matrix> {
        self.params.iter().map(|p| &p.grad).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.scalar_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.ncols() as u32).to_le_bytes());
            for row in p.value.rows() {
                for v in row {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let seed = cur.u64()?;
        let iteration = cur.u64()?;
        let count = cur.u32()? as usize;
        let mut store = Self {
            params: Vec::with_capacity(count),
            seed,
            iteration,
        };
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            let value = Matrix::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.add(name, value);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParameterStore::new(42);
        store.add("a", array![[1.0, 2.0, 3.0], [4.0, 5.0, -6.5]]);
        store.add("bias", array![[f64::MIN_POSITIVE]]);
        store.iteration = 17;
        let back = ParameterStore::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(back, store);
        let mut bytes = store.to_bytes();
        bytes.pop();
        assert!(ParameterStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn zero_grad_resets_exactly() {
        let mut store = ParameterStore::new(0);
        store.add("w", Matrix::zeros((2, 2)));
        store.accumulate(&[array![[1.0, 2.0], [3.0, 4.0]]]).unwrap();
        assert_eq!(store.get(0).grad.sum(), 10.0);
        store.zero_grad();
        assert!(store.get(0).grad.iter().all(|&g| g == 0.0));
        assert!(store.accumulate(&[Matrix::zeros((1, 2))]).is_err());
    }
}

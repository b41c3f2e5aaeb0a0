//! Row-major dense tensor of `f32`.
//!
//! Storage is `f32` (matching the on-disk formats); all arithmetic in the
//! crate widens to `f64` before accumulating.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that the element count matches the dims
    /// and every entry is finite.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Config(format!(
                "tensor dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("tensor contains non-finite entries".into()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Leading dimension (batch size for `N×c×h×w` batches).
    pub fn outer(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Elements per leading-dimension slice.
    pub fn inner_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    /// Borrow the `i`-th leading-dimension slice.
    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.inner_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// A new tensor holding the given leading-dimension slices, in order.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let n = self.inner_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.slice(i));
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Tensor { dims, data }
    }
}

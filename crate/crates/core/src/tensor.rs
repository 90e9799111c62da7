//! Dense NCHW tensors.

use crate::error::{Error, Result};

/// A dense 4-D tensor stored row-major in `(n, c, h, w)` order, `w` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor {dims:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of elements in one sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let [_, cc, hh, ww] = self.dims;
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Gathers the given samples, in the given order, into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.n() {
                return Err(Error::Shape(format!(
                    "sample index {i} out of range for batch of {}",
                    self.n()
                )));
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Self {
            dims: [indices.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor4::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor4::new([1, 2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(0, 1, 0, 2), 8.0);
        assert_eq!(t.at(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn select_gathers_samples() {
        let t = Tensor4::new([3, 1, 1, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let s = t.select(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[4., 5., 0., 1.]);
        assert!(t.select(&[3]).is_err());
    }
}

//! Dense row-major f64 tensors. Everything the engine computes lives in one of these.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N-dimensional array of f64 with shape metadata. Flat buffer, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorF {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorF {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        TensorF { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        TensorF { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "tensor shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(TensorF { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: f64) -> Self {
        TensorF { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Flat index for [H, W, C] layout.
    #[inline(always)]
    pub fn idx3(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (y * self.shape[1] + x) * self.shape[2] + c
    }

    #[inline(always)]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx3(y, x, c)]
    }

    pub fn set3(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx3(y, x, c);
        self.data[i] = v;
    }
}

/// Elementwise max abs difference; shapes must already agree.
pub fn max_abs_diff(a: &TensorF, b: &TensorF) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(TensorF::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(TensorF::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = TensorF::from_vec(&[2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 1), 1.0);
        assert_eq!(t.at3(0, 1, 0), 2.0);
        assert_eq!(t.at3(1, 0, 0), 4.0);
        assert_eq!(t.at3(1, 1, 1), 7.0);
    }

    #[test]
    fn scalar_item() {
        assert_eq!(TensorF::scalar(4.25).item(), 4.25);
    }
}

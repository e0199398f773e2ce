//! Dense row-major arrays of `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// A dense n-dimensional array stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// Builds a matrix from rows. All rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    /// The single value of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return shape_err(format!("item() on array of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at a 2-D index.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Array) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        if !self.same_shape(other) {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += scale * other`, in place.
    pub fn add_scaled(&mut self, other: &Array, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return shape_err(format!(
                "accumulate {:?} into {:?}",
                other.shape, self.shape
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Array) -> Result<Array> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return shape_err(format!(
                "matmul of {:?} and {:?}",
                self.shape, other.shape
            ));
        }
        let (r, k, c) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * c..(i + 1) * c];
            for (p, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[p * c..(p + 1) * c];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Array::new(vec![r, c], out)
    }

    pub fn transpose(&self) -> Result<Array> {
        if self.ndim() != 2 {
            return shape_err(format!("transpose of {:?}", self.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Array::new(vec![c, r], out)
    }
}

/// Mode-1 (vector) product of a `c x m x n` tensor with a length-`c` vector:
/// `out[i][j] = sum_k h[k][i][j] * z[k]`.
pub fn mode1_product(h: &Array, z: &Array) -> Result<Array> {
    if h.ndim() != 3 || z.ndim() != 1 || h.shape()[0] != z.len() {
        return shape_err(format!(
            "mode-1 product of {:?} with {:?}",
            h.shape(),
            z.shape()
        ));
    }
    let (m, n) = (h.shape()[1], h.shape()[2]);
    let slice = m * n;
    let mut out = vec![0.0; slice];
    for (k, &zk) in z.data().iter().enumerate() {
        let src = &h.data()[k * slice..(k + 1) * slice];
        for (o, &v) in out.iter_mut().zip(src) {
            *o += v * zk;
        }
    }
    Array::new(vec![m, n], out)
}

/// Numerically stable softmax of a vector.
pub fn softmax(s: &Array) -> Array {
    let max = s.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.data().iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Array::vector(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slices() -> Array {
        Array::new(vec![2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap()
    }

    #[test]
    fn mode1_basis_selects_slice() {
        let out = mode1_product(&slices(), &Array::vector(vec![1., 0.])).unwrap();
        assert_eq!(out.data(), &[1., 2., 3., 4.]);
        assert_eq!(out.shape(), &[2, 2]);
    }

    #[test]
    fn mode1_zero_vector() {
        let out = mode1_product(&slices(), &Array::vector(vec![0., 0.])).unwrap();
        assert_eq!(out.data(), &[0., 0., 0., 0.]);
    }

    #[test]
    fn mode1_ones_vector() {
        let out = mode1_product(&slices(), &Array::vector(vec![1., 1.])).unwrap();
        assert_eq!(out.data(), &[6., 8., 10., 12.]);
    }

    #[test]
    fn mode1_dimension_mismatch() {
        assert!(mode1_product(&slices(), &Array::vector(vec![1., 0., 0.])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Array::vector(vec![0., 0.]));
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&Array::vector(vec![0., 3f64.ln()]));
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
        let p = softmax(&Array::vector(vec![20., -20.]));
        assert!((p.data()[0] - 1.0).abs() < 1e-8);
        assert!(p.data()[1] < 1e-8);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Array::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Array::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let b = Array::from_rows(&[vec![5.], vec![6.]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17., 39.]);
    }
}

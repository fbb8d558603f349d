//! Dense 2-D tensors of 64-bit floats, row-major.
//!
//! Every matrix and vector in the model lives in this type: feature windows,
//! hidden states, attention matrices, parameters. Vectors are 1xK or Kx1
//! tensors. All forward operations must produce finite values; NaN/Inf is an
//! error state, checked by the tape layer.

use crate::error::{Error, Result};

pub const SIM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// 1x1 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// 1xN row vector.
    pub fn row_vec(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// Nx1 column vector.
    pub fn col_vec(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Extract the scalar from a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar {
                op: "item",
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert!(self.same_shape(other));
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// self += scale * other, elementwise. Shapes must already match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Standard matrix product. Shapes are checked by the caller (the tape).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.cols, other.rows);
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two equal-length vectors, in [-1, 1].
///
/// Returns the value together with a degeneracy flag: when either input has
/// (near-)zero norm the similarity is defined as 0 and the flag is set,
/// marking a non-differentiable point. The denominator is guarded at
/// [`SIM_EPS`].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> (f64, bool) {
    debug_assert_eq!(a.len(), b.len());
    let (na, nb) = (norm(a), norm(b));
    if na <= SIM_EPS || nb <= SIM_EPS {
        return (0.0, true);
    }
    ((dot(a, b) / (na * nb)).clamp(-1.0, 1.0), false)
}

/// Pearson correlation: cosine similarity of the mean-centered vectors.
///
/// Zero variance in either input yields 0 (defined as uncorrelated).
pub fn pearson_corr(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    debug_assert!(a.len() >= 2);
    let center = |v: &[f64]| -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|&x| x - mean).collect()
    };
    cosine_sim(&center(a), &center(b)).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&eye), a);
    }

    #[test]
    fn matmul_dot_product() {
        let a = Tensor::row_vec(vec![1.0, 2.0]);
        let b = Tensor::col_vec(vec![3.0, 4.0]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c.item().unwrap(), 11.0);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transposed().transposed(), a);
        assert_eq!(a.transposed().get(2, 1), 6.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let (c, flag) = cosine_sim(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(c, 0.0);
        assert!(!flag);
    }

    #[test]
    fn cosine_parallel_is_one_scale_invariant() {
        let (c, _) = cosine_sim(&[2.0, 0.0], &[1.0, 0.0]);
        assert!((c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_antiparallel_is_minus_one() {
        let (c, _) = cosine_sim(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]);
        assert!((c + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_flags_degenerate() {
        let (c, flag) = cosine_sim(&[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(c, 0.0);
        assert!(flag);
    }

    #[test]
    fn pearson_exact_linear() {
        assert!((pearson_corr(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson_corr(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_zero_variance_is_zero() {
        assert_eq!(pearson_corr(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn pearson_affine_invariance() {
        let a = [0.3, -1.2, 2.4, 0.9];
        let b: Vec<f64> = a.iter().map(|&x| 2.5 * x + 7.0).collect();
        assert!((pearson_corr(&a, &b) - 1.0).abs() < 1e-9);
    }
}

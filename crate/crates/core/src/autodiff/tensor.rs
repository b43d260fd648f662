use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of f64. Shape is fixed at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not fit shape ({rows}, {cols})",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Tensor {
        Tensor {
            rows: 1,
            cols: data.len(),
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// self += other (same shape).
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += k * other (same shape).
    pub fn scaled_add_assign(&mut self, k: f64, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }
}

/// c = a @ b
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.rows);
    let (n, m) = (a.rows, b.cols);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let o_row = out.row_mut(i);
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * m..(kk + 1) * m];
            for j in 0..m {
                o_row[j] += aik * b_row[j];
            }
        }
    }
    out
}

/// c = a @ b^T
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.cols);
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let o_row = out.row_mut(i);
        for j in 0..m {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a_row[kk] * b_row[kk];
            }
            o_row[j] = acc;
        }
    }
    out
}

/// c = a^T @ b
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let (n, k, m) = (a.cols, a.rows, b.cols);
    let mut out = Tensor::zeros(n, m);
    for kk in 0..k {
        let a_row = a.row(kk);
        let b_row = b.row(kk);
        for i in 0..n {
            let aik = a_row[i];
            let o_row = out.row_mut(i);
            for j in 0..m {
                o_row[j] += aik * b_row[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.3 - 1.0);
        let b = Tensor::from_fn(4, 2, |i, j| (i * 2 + j) as f64 * 0.7 - 2.0);
        let c = matmul(&a, &b);
        // a @ b == (b^T @ a^T)^T — check one entry by hand instead.
        let mut expect = 0.0;
        for k in 0..4 {
            expect += a.get(1, k) * b.get(k, 1);
        }
        assert!((c.get(1, 1) - expect).abs() < 1e-12);

        let bt = Tensor::from_fn(2, 4, |i, j| b.get(j, i));
        let c2 = matmul_nt(&a, &bt);
        assert_eq!(c, c2);

        let at = Tensor::from_fn(4, 3, |i, j| a.get(j, i));
        let c3 = matmul_tn(&at, &b);
        assert_eq!(c, c3);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}

use std::fmt;

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Dense row-major matrix.
///
/// Row vectors are `1×n` matrices; batches are stacked rows.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(rows, cols, values.iter().map(|&v| T::lit(v)).collect())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies row `r` out as a `1×cols` matrix.
    pub fn row_matrix(&self, r: usize) -> Self {
        Self::row_vector(self.row(r).to_vec())
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn ensure_shape(&self, op: &'static str, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: shape,
            });
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        self.ensure_shape(op, other.shape())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * m..(i + 1) * m];
            for (k, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Dimension {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let o_row = &mut out.data[i * m..(i + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.rows, other.rows);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.data[i * m + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Sums each column, producing a `1×cols` matrix. Rows are reduced in order.
    pub fn column_sum(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for row in self.row_iter() {
            for (o, &v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn mean_rows(&self) -> Self {
        let mut s = self.column_sum();
        if self.rows > 0 {
            let inv = T::one() / T::lit(self.rows as f64);
            s.scale_mut(inv);
        }
        s
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape("add", other)?;
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.ensure_same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale_mut(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.scale_mut(s);
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

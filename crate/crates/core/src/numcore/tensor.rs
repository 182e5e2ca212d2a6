use std::fmt;

use crate::error::{Error, Result};
use crate::exec::ExecMode;

/// Products with fewer multiply-adds than this run on the calling thread.
const PARALLEL_MATMUL_WORK: usize = 1 << 16;

/// Dense row-major matrix of `f64`.
///
/// A `Tensor` is a plain value. Gradient tracking lives on the
/// [`Tape`](super::Tape), which wraps tensors in nodes addressed by
/// [`Var`](super::Var) handles.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("tensor", format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {rows}x{cols}", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor shape must be positive");
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, value)
    }

    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(1, n, values)
    }

    pub fn column(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(n, 1, values)
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        assert!(start < end && end <= self.rows);
        Tensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Gather the given rows into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor { rows: rows.len(), cols: self.cols, data }
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_with(other, ExecMode::Sequential)
    }

    pub fn matmul_with(&self, other: &Tensor, exec: ExecMode) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs {}x{} vs rhs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        let exec = pick(exec, m * k * n);
        exec.for_each_row_chunk(&mut out, n, |i, orow| {
            let arow = &self.data[i * k..(i + 1) * k];
            for (kk, &a) in arow.iter().enumerate() {
                // Observation windows are mostly zero.
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        });
        Ok(Tensor { rows: m, cols: n, data: out })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn tmatmul_with(&self, other: &Tensor, exec: ExecMode) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "tmatmul",
                format!("lhs {}x{} vs rhs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; k * n];
        match pick(exec, m * k * n) {
            ExecMode::Parallel => {
                ExecMode::Parallel.for_each_row_chunk(&mut out, n, |kk, orow| {
                    for i in 0..m {
                        let a = self.data[i * k + kk];
                        if a == 0.0 {
                            continue;
                        }
                        let brow = &other.data[i * n..(i + 1) * n];
                        for (o, &b) in orow.iter_mut().zip(brow) {
                            *o += a * b;
                        }
                    }
                });
            }
            ExecMode::Sequential => {
                // Same summation order over `i` as the parallel branch.
                for i in 0..m {
                    let arow = &self.data[i * k..(i + 1) * k];
                    let brow = &other.data[i * n..(i + 1) * n];
                    for (kk, &a) in arow.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let orow = &mut out[kk * n..(kk + 1) * n];
                        for (o, &b) in orow.iter_mut().zip(brow) {
                            *o += a * b;
                        }
                    }
                }
            }
        }
        Ok(Tensor { rows: k, cols: n, data: out })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t_with(&self, other: &Tensor, exec: ExecMode) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("lhs {}x{} vs rhs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        // An explicit transpose keeps the inner loop vectorizable.
        self.matmul_with(&other.transpose(), exec)
    }
}

fn pick(exec: ExecMode, work: usize) -> ExecMode {
    if work >= PARALLEL_MATMUL_WORK {
        exec
    } else {
        ExecMode::Sequential
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
    }

    fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
        (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(m, k, n)| (tensor(m, k), tensor(k, n)))
    }

    proptest! {
        #[test]
        fn product_transpose_is_reversed_product((a, b) in pair()) {
            let left = a.matmul(&b).unwrap().transpose();
            let right = b.transpose().matmul(&a.transpose()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn exec_modes_agree_bitwise((a, b) in pair()) {
            let p = a.matmul_with(&b, ExecMode::Parallel).unwrap();
            let s = a.matmul_with(&b, ExecMode::Sequential).unwrap();
            prop_assert_eq!(&p, &s);
            let t = a.tmatmul_with(&a, ExecMode::Parallel).unwrap();
            prop_assert!(t.max_abs_diff(&a.transpose().matmul(&a).unwrap()) < 1e-9);
        }

        #[test]
        fn transpose_is_an_involution(t in (1usize..7, 1usize..7).prop_flat_map(|(r, c)| tensor(r, c))) {
            prop_assert_eq!(t.transpose().transpose(), t);
        }
    }
}

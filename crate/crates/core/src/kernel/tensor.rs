use crate::error::{Error, Result};
use crate::types::TokenGrid;

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Multiplies `rows x inner` row-major `a` by `b`.
///
/// Every output element accumulates over the inner index in ascending
/// order, independent of how many rows `a` has, so a row computed alone is
/// bit-identical to the same row computed inside a larger matrix.
pub(crate) fn matmul(a: &[f32], rows: usize, b: &Matrix) -> Vec<f32> {
    let inner = b.rows;
    debug_assert_eq!(a.len(), rows * inner);
    let mut out = vec![0.0f32; rows * b.cols];
    for i in 0..rows {
        let a_row = &a[i * inner..(i + 1) * inner];
        let o_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &b_kj) in o_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    out
}

/// `batch x tokens x hidden` activations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub batch: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(grid: TokenGrid) -> Tensor3 {
        Tensor3 {
            batch: grid.batch,
            tokens: grid.tokens,
            hidden: grid.hidden,
            data: vec![0.0; grid.elements()],
        }
    }

    pub fn from_vec(grid: TokenGrid, data: Vec<f32>) -> Result<Tensor3> {
        if data.len() != grid.elements() {
            return Err(Error::invalid(format!(
                "tensor {grid:?} needs {} values, got {}",
                grid.elements(),
                data.len()
            )));
        }
        Ok(Tensor3 {
            batch: grid.batch,
            tokens: grid.tokens,
            hidden: grid.hidden,
            data,
        })
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid {
            batch: self.batch,
            tokens: self.tokens,
            hidden: self.hidden,
        }
    }

    pub fn item(&self, b: usize) -> &[f32] {
        let n = self.tokens * self.hidden;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn row(&self, b: usize, t: usize) -> &[f32] {
        let start = (b * self.tokens + t) * self.hidden;
        &self.data[start..start + self.hidden]
    }

    pub fn row_mut(&mut self, b: usize, t: usize) -> &mut [f32] {
        let start = (b * self.tokens + t) * self.hidden;
        &mut self.data[start..start + self.hidden]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

//! Dense row-major matrices and the three multiply kernels the network needs.
//!
//! All arithmetic is `f64` and every kernel accumulates each output entry in
//! a fixed, documented order (ascending inner index), so results are
//! bit-for-bit reproducible across runs. The kernels process a few output
//! rows per pass to keep the operand that is streamed over in cache; the
//! blocking never changes the per-entry accumulation order.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Matrix wrapping an existing row-major buffer.
    ///
    /// Panics if the buffer length does not equal `rows * cols`; that is a
    /// programming error, not a data error.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "buffer length {} does not match {rows}x{cols}",
            data.len()
        );
        Matrix { rows, cols, data }
    }

    /// Matrix from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Reinterprets the buffer under a new shape with the same length.
    /// Row-major layout makes this free; it is how a batch of flattened
    /// patches (`n x 9*bands`) doubles as a batch of pixels (`9n x bands`).
    pub fn reshape(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(
            self.data.len(),
            rows * cols,
            "cannot view {}x{} as {rows}x{cols}",
            self.rows,
            self.cols
        );
        self.rows = rows;
        self.cols = cols;
        self
    }

    /// New matrix holding the selected rows, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Entrywise map into a new matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Adds `bias` to every row; `bias.len()` must equal `cols`.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols, "bias length must match columns");
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, &b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    /// Entrywise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += scale * y;
        }
    }

    /// Entrywise scaling in place.
    pub fn scale(&mut self, factor: f64) {
        for x in &mut self.data {
            *x *= factor;
        }
    }

    /// Plain transpose; used by tests and small one-off layouts.
    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_inner(&self, op: &'static str, lhs_inner: usize, rhs_inner: usize, rhs: &Matrix) -> Result<()> {
        if lhs_inner != rhs_inner {
            return Err(Error::Shape {
                op,
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("{}x{}", rhs.rows, rhs.cols),
            });
        }
        Ok(())
    }

    /// `self * rhs`.
    ///
    /// Blocked over four output rows; each entry accumulates over the inner
    /// dimension in ascending order.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_inner("matmul", self.cols, rhs.rows, rhs)?;
        let (n, inner, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(n, m);
        let mut i = 0;
        while i + 4 <= n {
            let a0 = self.row(i);
            let a1 = self.row(i + 1);
            let a2 = self.row(i + 2);
            let a3 = self.row(i + 3);
            let (o0, rest) = out.data[i * m..(i + 4) * m].split_at_mut(m);
            let (o1, rest) = rest.split_at_mut(m);
            let (o2, o3) = rest.split_at_mut(m);
            for k in 0..inner {
                let b_row = &rhs.data[k * m..(k + 1) * m];
                let (c0, c1, c2, c3) = (a0[k], a1[k], a2[k], a3[k]);
                for j in 0..m {
                    let b = b_row[j];
                    o0[j] += c0 * b;
                    o1[j] += c1 * b;
                    o2[j] += c2 * b;
                    o3[j] += c3 * b;
                }
            }
            i += 4;
        }
        while i < n {
            let a = self.row(i);
            let o = &mut out.data[i * m..(i + 1) * m];
            for (k, &c) in a.iter().enumerate() {
                let b_row = &rhs.data[k * m..(k + 1) * m];
                for j in 0..m {
                    o[j] += c * b_row[j];
                }
            }
            i += 1;
        }
        Ok(out)
    }

    /// `self^T * rhs`, without materializing the transpose.
    ///
    /// This is the gradient-of-weights product: `self` is a batch of layer
    /// inputs (`n x in`), `rhs` a batch of output gradients (`n x out`).
    /// Each entry accumulates over the batch dimension in ascending order;
    /// the output is tiled so the accumulator block stays in cache while the
    /// batch streams past.
    pub fn matmul_at_b(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_inner("matmul_at_b", self.rows, rhs.rows, rhs)?;
        let (n, p, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Matrix::zeros(p, m);
        const TILE: usize = 64;
        let mut r0 = 0;
        while r0 < p {
            let r1 = (r0 + TILE).min(p);
            for i in 0..n {
                let a_row = &self.data[i * p..(i + 1) * p];
                let b_row = &rhs.data[i * m..(i + 1) * m];
                let tile_out = &mut out.data[r0 * m..r1 * m];
                for (&a, o) in a_row[r0..r1].iter().zip(tile_out.chunks_exact_mut(m)) {
                    for j in 0..m {
                        o[j] += a * b_row[j];
                    }
                }
            }
            r0 = r1;
        }
        Ok(out)
    }

    /// `self * rhs^T`, without materializing the transpose.
    ///
    /// This is the gradient-of-inputs product: `self` is a batch of output
    /// gradients (`n x out`), `rhs` a weight matrix (`in x out`). Each output
    /// entry is a dot product accumulated in four interleaved partial sums
    /// that are combined as `(s0 + s1) + (s2 + s3)`; the order is fixed, so
    /// results stay reproducible.
    pub fn matmul_a_bt(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_inner("matmul_a_bt", self.cols, rhs.cols, rhs)?;
        let (n, inner, m) = (self.rows, self.cols, rhs.rows);
        let mut out = Matrix::zeros(n, m);
        let mut i = 0;
        while i + 2 <= n {
            let a0 = self.row(i);
            let a1 = self.row(i + 1);
            for r in 0..m {
                let b = &rhs.data[r * inner..(r + 1) * inner];
                let (d0, d1) = dot2(a0, a1, b);
                out.data[i * m + r] = d0;
                out.data[(i + 1) * m + r] = d1;
            }
            i += 2;
        }
        if i < n {
            let a = self.row(i);
            for r in 0..m {
                let b = &rhs.data[r * inner..(r + 1) * inner];
                out.data[i * m + r] = dot1(a, b);
            }
        }
        Ok(out)
    }
}

/// Dot product with four interleaved partial sums, combined in fixed order.
fn dot1(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        s[0] += a[k] * b[k];
        s[1] += a[k + 1] * b[k + 1];
        s[2] += a[k + 2] * b[k + 2];
        s[3] += a[k + 3] * b[k + 3];
    }
    for k in chunks * 4..a.len() {
        s[k % 4] += a[k] * b[k];
    }
    (s[0] + s[1]) + (s[2] + s[3])
}

/// Two dot products against the same right-hand side, sharing its pass.
fn dot2(a0: &[f64], a1: &[f64], b: &[f64]) -> (f64, f64) {
    debug_assert_eq!(a0.len(), b.len());
    debug_assert_eq!(a1.len(), b.len());
    let mut s0 = [0.0f64; 4];
    let mut s1 = [0.0f64; 4];
    let chunks = b.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        s0[0] += a0[k] * b[k];
        s0[1] += a0[k + 1] * b[k + 1];
        s0[2] += a0[k + 2] * b[k + 2];
        s0[3] += a0[k + 3] * b[k + 3];
        s1[0] += a1[k] * b[k];
        s1[1] += a1[k + 1] * b[k + 1];
        s1[2] += a1[k + 2] * b[k + 2];
        s1[3] += a1[k + 3] * b[k + 3];
    }
    for k in chunks * 4..b.len() {
        s0[k % 4] += a0[k] * b[k];
        s1[k % 4] += a1[k] * b[k];
    }
    (
        (s0[0] + s0[1]) + (s0[2] + s0[3]),
        (s1[0] + s1[1]) + (s1[2] + s1[3]),
    )
}

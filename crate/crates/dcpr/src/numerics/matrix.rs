//! Dense row-major matrices over `f32` or `f64`.
//!
//! Shapes are checked eagerly: a dimension mismatch is a programming error
//! and panics with both shapes in the message. Numeric soundness (no NaN/Inf
//! escaping an operation) is enforced with debug assertions so test builds
//! catch divergence at the op that produced it.

use std::fmt;

/// Scalar element type: the subset of float behaviour the library needs,
/// implemented for `f32` and `f64`.
///
/// Models and the pipeline run in `f32` (matching the checkpoint format);
/// verification tests instantiate the same code at `f64`.
pub trait Real:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Size of one element when serialized (little-endian).
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Append the little-endian byte representation to `out`.
    fn write_le(self, out: &mut Vec<u8>);
}

impl Real for f32 {
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive, got {rows}x{cols}");
        Matrix { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive, got {rows}x{cols}");
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Matrix { rows, cols, data }
    }

    /// Build from nested rows (convenient in tests).
    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        assert!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Matrix { rows: rows.len(), cols, data }
    }

    /// Identity matrix scaled by `scale`.
    pub fn scaled_identity(n: usize, scale: F) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, scale);
        }
        m
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        assert!(r < self.rows, "row {r} out of range for {}x{}", self.rows, self.cols);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        assert!(r < self.rows, "row {r} out of range for {}x{}", self.rows, self.cols);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a 1x1 matrix.
    pub fn scalar(&self) -> F {
        assert_eq!((self.rows, self.cols), (1, 1), "scalar() on {}x{} matrix", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Matrix<F>) -> Matrix<F> {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == F::zero() {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix<F> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix<F>) -> Matrix<F> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix<F>) -> Matrix<F> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Element-wise product.
    pub fn hadamard(&self, other: &Matrix<F>) -> Matrix<F> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix<F>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: F) -> Matrix<F> {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Matrix<F> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix<F>, f: impl Fn(F, F) -> F) -> Matrix<F> {
        assert_eq!(
            self.shape(),
            other.shape(),
            "element-wise op shape mismatch: {}x{} vs {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Add a 1xC row vector to every row.
    pub fn add_row_broadcast(&self, row: &Matrix<F>) -> Matrix<F> {
        assert_eq!(row.rows, 1, "broadcast row must be 1x{}, got {}x{}", self.cols, row.rows, row.cols);
        assert_eq!(
            row.cols, self.cols,
            "broadcast width mismatch: {}x{} + 1x{}",
            self.rows, self.cols, row.cols
        );
        let mut out = self.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                let v = out.get(r, c) + row.get(0, c);
                out.set(r, c, v);
            }
        }
        out
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn row_softmax(&self) -> Matrix<F> {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        out
    }

    /// Column sums: RxC -> 1xC.
    pub fn sum_rows(&self) -> Matrix<F> {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = out.get(0, c) + self.get(r, c);
                out.set(0, c, v);
            }
        }
        out
    }

    /// Sum of all elements as a 1x1 matrix.
    pub fn sum_all(&self) -> Matrix<F> {
        let mut s = F::zero();
        for &v in &self.data {
            s = s + v;
        }
        Matrix::from_vec(1, 1, vec![s])
    }

    /// Gather rows by index into a new matrix (row `i` of the output is row
    /// `indices[i]` of `self`).
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix<F> {
        assert!(!indices.is_empty(), "gather_rows needs at least one index");
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (i, &src) in indices.iter().enumerate() {
            assert!(src < self.rows, "gather index {src} out of range for {} rows", self.rows);
            out.row_mut(i).copy_from_slice(self.row(src));
        }
        out
    }

    /// Inner product of two 1xD row vectors.
    pub fn dot(&self, other: &Matrix<F>) -> F {
        assert_eq!(self.rows, 1, "dot expects row vectors");
        assert_eq!(other.rows, 1, "dot expects row vectors");
        assert_eq!(self.cols, other.cols, "dot width mismatch: {} vs {}", self.cols, other.cols);
        let mut s = F::zero();
        for c in 0..self.cols {
            s = s + self.get(0, c) * other.get(0, c);
        }
        s
    }

    /// Cast element type (used by tests to lift f32 fixtures to f64).
    pub fn cast<G: Real>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute element difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix<F>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<F: Real> fmt::Debug for Matrix<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.6} ", self.get(r, c).to_f64())?;
            }
            writeln!(f, "{}", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

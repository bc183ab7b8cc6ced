//! Dense row-major matrices and the small set of structured numerical
//! routines the kernels are built from: GEMM-backed matmul, inversion of
//! unit-lower-triangular matrices by forward substitution, triangular
//! masking, L2 normalization, and per-chunk cumulative decay products
//! accumulated in log space.

use crate::error::{KernelError, Result};
use crate::real::Real;

/// Default epsilon for [`l2_normalize`].
pub const L2_NORM_EPS: f64 = 1e-6;

/// Dense row-major matrix with selectable element precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KernelError::dim(
                "Matrix::from_vec",
                format!("{} elements for {rows}x{cols}", rows * cols),
                format!("{}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from a closure over (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn get(&self, i: usize, j: usize) -> T {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self @ other` with GEMM accumulation in the element precision.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(KernelError::dim(
                "matmul",
                format!("lhs cols == rhs rows ({} x {})", self.rows, self.cols),
                format!("{} x {}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        T::gemm(
            self.rows,
            self.cols,
            other.cols,
            T::one(),
            &self.data,
            &other.data,
            T::zero(),
            &mut out.data,
        );
        Ok(out)
    }

    /// `out = alpha * self @ other + beta * out`, reusing `out`'s storage.
    pub fn matmul_into(&self, other: &Matrix<T>, alpha: T, beta: T, out: &mut Matrix<T>) -> Result<()> {
        if self.cols != other.rows || out.rows != self.rows || out.cols != other.cols {
            return Err(KernelError::dim(
                "matmul_into",
                format!("({} x {}) @ ({} x _) -> ({} x _)", self.rows, self.cols, self.cols, self.rows),
                format!(
                    "({} x {}) @ ({} x {}) -> ({} x {})",
                    self.rows, self.cols, other.rows, other.cols, out.rows, out.cols
                ),
            ));
        }
        T::gemm(
            self.rows,
            self.cols,
            other.cols,
            alpha,
            &self.data,
            &other.data,
            beta,
            &mut out.data,
        );
        Ok(())
    }

    /// Multiply row `i` by `scale[i]` in place.
    pub fn scale_rows(&mut self, scale: &[T]) {
        assert_eq!(scale.len(), self.rows);
        for (i, s) in scale.iter().enumerate() {
            for x in self.row_mut(i) {
                *x = *x * *s;
            }
        }
    }

    /// Matrix-vector product `self @ x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        let mut out = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            out.push(dot(self.row(i), x));
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }

    /// Largest absolute elementwise difference, in f64.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// `x / (||x||_2 + eps)`.
pub fn l2_normalize<T: Real>(x: &[T], eps: f64) -> Vec<T> {
    let norm = dot(x, x).as_f64().sqrt();
    let inv = T::from_f64(1.0 / (norm + eps));
    x.iter().map(|v| *v * inv).collect()
}

/// In-place variant of [`l2_normalize`]; returns the pre-normalization norm.
pub fn l2_normalize_in_place<T: Real>(x: &mut [T], eps: f64) -> f64 {
    let norm = dot(x, x).as_f64().sqrt();
    let inv = T::from_f64(1.0 / (norm + eps));
    for v in x.iter_mut() {
        *v = *v * inv;
    }
    norm
}

/// Copy of `m` with entries above the diagonal zeroed; with `strict`, the
/// diagonal is zeroed as well.
pub fn masked_lower<T: Real>(m: &Matrix<T>, strict: bool) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let lo = if strict { i } else { i + 1 };
        for j in lo..m.cols() {
            out.set(i, j, T::zero());
        }
    }
    out
}

/// Inverse of a unit-lower-triangular matrix by forward substitution.
///
/// Only entries strictly below the diagonal of `l` are read; the diagonal is
/// taken to be implicitly 1. Accumulation is in double precision regardless
/// of the element precision.
pub fn tril_inverse_unit<T: Real>(l: &Matrix<T>) -> Result<Matrix<T>> {
    if l.rows() != l.cols() {
        return Err(KernelError::dim(
            "tril_inverse_unit",
            "square matrix".to_string(),
            format!("{} x {}", l.rows(), l.cols()),
        ));
    }
    let n = l.rows();
    let lf: Vec<f64> = l.as_slice().iter().map(|x| x.as_f64()).collect();
    let mut inv = vec![0.0f64; n * n];
    // Row i of the inverse: X[i][i] = 1 and, for j < i,
    // X[i][j] = -sum_{p=j}^{i-1} L[i][p] X[p][j].
    for i in 0..n {
        inv[i * n + i] = 1.0;
        for j in (0..i).rev() {
            let mut acc = 0.0;
            for p in j..i {
                acc += lf[i * n + p] * inv[p * n + j];
            }
            inv[i * n + j] = -acc;
        }
    }
    Ok(Matrix {
        rows: n,
        cols: n,
        data: inv.into_iter().map(T::from_f64).collect(),
    })
}

/// Cumulative decay products for one chunk, built in log space so long runs
/// of gates below 1 neither underflow prematurely nor lose the ratios
/// between nearby positions.
///
/// With per-token gates `alpha[0..c]`, define `prefix[r] = prod_{s<r} alpha[s]`
/// (`prefix[0] = 1`). Entries are token-indexed:
///
/// * `ratio` is `c x c`, lower-triangular with unit diagonal:
///   `ratio(i, j) = prefix[i+1] / prefix[j+1]` for `j <= i` — the decay
///   accumulated on positions after token `j`, through token `i`.
/// * `suffix[i] = prefix[c] / prefix[i+1]` — the decay a write at token `i`
///   still experiences before the end of the chunk (`suffix[c-1] = 1`).
#[derive(Debug, Clone)]
pub struct DecayProducts<T> {
    pub chunk_size: usize,
    pub alpha: Vec<T>,
    pub prefix: Vec<T>,
    pub ratio: Matrix<T>,
    pub suffix: Vec<T>,
    log_prefix: Vec<f64>,
}

impl<T: Real> DecayProducts<T> {
    /// `prefix` up to full double-precision log accumulation; entries of the
    /// ratio/suffix tables are exponentials of log differences.
    pub fn build(alpha: &[T]) -> Result<Self> {
        let c = alpha.len();
        let mut log_prefix = Vec::with_capacity(c + 1);
        log_prefix.push(0.0f64);
        for (t, a) in alpha.iter().enumerate() {
            let af = a.as_f64();
            if !(af > 0.0 && af <= 1.0) || !af.is_finite() {
                return Err(KernelError::contract(
                    "DecayProducts::build",
                    format!("alpha[{t}] = {af} outside (0, 1]"),
                ));
            }
            let prev = *log_prefix.last().unwrap();
            log_prefix.push(prev + af.ln());
        }
        let prefix: Vec<T> = log_prefix.iter().map(|lp| T::from_f64(lp.exp())).collect();
        let ratio = Matrix::from_fn(c, c, |i, j| {
            if j <= i {
                T::from_f64((log_prefix[i + 1] - log_prefix[j + 1]).exp())
            } else {
                T::zero()
            }
        });
        let suffix: Vec<T> = (0..c)
            .map(|i| T::from_f64((log_prefix[c] - log_prefix[i + 1]).exp()))
            .collect();
        Ok(DecayProducts {
            chunk_size: c,
            alpha: alpha.to_vec(),
            prefix,
            ratio,
            suffix,
            log_prefix,
        })
    }

    /// Log of `prefix[r]`, `r` in `0..=chunk_size`.
    #[inline]
    pub fn log_prefix(&self) -> &[f64] {
        &self.log_prefix
    }

    /// `prefix[i] / prefix[j+1]` for `j < i`: the decay accumulated strictly
    /// after token `j` and strictly before token `i`. This is the shifted
    /// ratio table used when assembling the triangular write-interaction
    /// system (row `i` of that system sees the state as of token `i-1`).
    #[inline]
    pub fn ratio_before(&self, i: usize, j: usize) -> T {
        debug_assert!(j < i && i <= self.chunk_size);
        T::from_f64((self.log_prefix[i] - self.log_prefix[j + 1]).exp())
    }
}

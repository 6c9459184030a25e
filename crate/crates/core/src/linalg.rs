//! Dense and sparse linear algebra: Cholesky factorization with a jitter
//! ladder, triangular solves, log-determinants, block-diagonal solves and a
//! symmetric eigensolver. All numerics are f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter ladder applied to the diagonal before declaring a matrix
/// not positive definite. Scaled by the mean diagonal magnitude.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

const SYMMETRY_TOL: f64 = 1e-10;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows * cols");
        DenseMatrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn add_diagonal(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }

    /// C = A * B.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut c = Self::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut c.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (cv, &b) in c_row.iter_mut().zip(b_row) {
                    *cv += a * b;
                }
            }
        }
        c
    }

    /// C = A * B'.
    pub fn matmul_bt(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.cols, "matmul_bt shape mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut c = Self::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                c.data[i * n + j] = dot(a_row, b_row);
            }
        }
        c
    }

    /// C = A' * B.
    pub fn atmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, other.rows, "atmul shape mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut c = Self::zeros(m, n);
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let c_row = &mut c.data[i * n..(i + 1) * n];
                for (cv, &b) in c_row.iter_mut().zip(b_row) {
                    *cv += a * b;
                }
            }
        }
        c
    }

    /// y = A * x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn is_symmetric_within(&self, tol: f64) -> Option<(usize, usize, f64)> {
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let a = self.at(i, j);
                let b = self.at(j, i);
                let diff = (a - b).abs();
                if diff > tol * a.abs().max(1.0) {
                    return Some((i, j, diff));
                }
            }
        }
        None
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sparse row-wise design matrix. Stores (column, value) pairs per row;
/// random-intercepts designs have exactly one entry per row and test rows
/// with unseen levels are represented by empty rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDesign {
    rows: usize,
    cols: usize,
    entries: Vec<Vec<(usize, f64)>>,
}

impl SparseDesign {
    pub fn new(rows: usize, cols: usize) -> Self {
        SparseDesign {
            rows,
            cols,
            entries: vec![Vec::new(); rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(col < self.cols && value != 0.0);
        self.entries[row].push((col, value));
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[i]
    }

    /// y = Z * x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "sparse matvec shape mismatch");
        self.entries
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }

    /// y = Z' * x.
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "sparse t_matvec shape mismatch");
        let mut y = vec![0.0; self.cols];
        for (i, row) in self.entries.iter().enumerate() {
            for &(c, v) in row {
                y[c] += v * x[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for (i, row) in self.entries.iter().enumerate() {
            for &(c, v) in row {
                *m.at_mut(i, c) += v;
            }
        }
        m
    }
}

/// Lower-triangular Cholesky factor of A + jitter * I.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DenseMatrix,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }
}

/// Factorize a symmetric positive definite matrix, walking the jitter ladder
/// when the bare factorization breaks down.
pub fn cholesky(a: &DenseMatrix) -> Result<CholeskyFactor> {
    if a.rows() != a.cols() {
        return Err(Error::DimensionMismatch {
            context: "cholesky",
            expected: a.rows(),
            actual: a.cols(),
        });
    }
    if let Some((i, j, diff)) = a.is_symmetric_within(SYMMETRY_TOL) {
        return Err(Error::NotSymmetric { i, j, diff });
    }
    let n = a.rows();
    let mean_diag = if n > 0 {
        (0..n).map(|i| a.at(i, i).abs()).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };

    let mut max_jitter = 0.0;
    for &level in &JITTER_LADDER {
        let jitter = level * scale;
        max_jitter = jitter;
        if let Some(l) = try_cholesky(a, jitter) {
            return Ok(CholeskyFactor { l, jitter });
        }
    }
    Err(Error::NotPositiveDefinite { max_jitter })
}

fn try_cholesky(a: &DenseMatrix, jitter: f64) -> Option<DenseMatrix> {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let s = {
            let rj = &l.data()[j * n..j * n + j];
            dot(rj, rj)
        };
        let d = a.at(j, j) + jitter - s;
        if !d.is_finite() || d <= 0.0 {
            return None;
        }
        let ljj = d.sqrt();
        l.data_mut()[j * n + j] = ljj;
        for i in (j + 1)..n {
            let s = {
                let data = l.data();
                dot(&data[i * n..i * n + j], &data[j * n..j * n + j])
            };
            l.data_mut()[i * n + j] = (a.at(i, j) - s) / ljj;
        }
    }
    Some(l)
}

/// Solve A X = B given the factor of A. B columns are solved independently.
pub fn solve(factor: &CholeskyFactor, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = factor.dim();
    if b.rows() != n {
        return Err(Error::DimensionMismatch {
            context: "solve",
            expected: n,
            actual: b.rows(),
        });
    }
    let mut x = DenseMatrix::zeros(n, b.cols());
    let mut col = vec![0.0; n];
    for j in 0..b.cols() {
        for i in 0..n {
            col[i] = b.at(i, j);
        }
        solve_in_place(factor, &mut col);
        for i in 0..n {
            *x.at_mut(i, j) = col[i];
        }
    }
    Ok(x)
}

/// Solve A x = b for a single right-hand side.
pub fn solve_vec(factor: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>> {
    let n = factor.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            context: "solve",
            expected: n,
            actual: b.len(),
        });
    }
    let mut x = b.to_vec();
    solve_in_place(factor, &mut x);
    Ok(x)
}

fn solve_in_place(factor: &CholeskyFactor, x: &mut [f64]) {
    let n = factor.dim();
    let l = &factor.l;
    // Forward: L y = b.
    for k in 0..n {
        let row = l.row(k);
        let s = dot(&row[..k], &x[..k]);
        x[k] = (x[k] - s) / row[k];
    }
    // Backward: L' x = y, saxpy form to keep row access contiguous.
    for k in (0..n).rev() {
        let row = l.row(k);
        x[k] /= row[k];
        let xk = x[k];
        for (xi, &lki) in x[..k].iter_mut().zip(&row[..k]) {
            *xi -= lki * xk;
        }
    }
}

/// Explicit inverse via n triangular solves against the identity.
pub fn inverse(factor: &CholeskyFactor) -> DenseMatrix {
    let n = factor.dim();
    let mut inv = DenseMatrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        solve_in_place(factor, &mut col);
        for i in 0..n {
            *inv.at_mut(i, j) = col[i];
        }
    }
    inv
}

/// log |A| = 2 * sum(log L_ii).
pub fn logdet(factor: &CholeskyFactor) -> f64 {
    let l = &factor.l;
    (0..l.rows()).map(|i| l.at(i, i).ln()).sum::<f64>() * 2.0
}

/// Solve a block-diagonal SPD system given its diagonal blocks.
pub fn block_solve(blocks: &[DenseMatrix], e: &[f64]) -> Result<Vec<f64>> {
    let total: usize = blocks.iter().map(|b| b.rows()).sum();
    if total != e.len() {
        return Err(Error::DimensionMismatch {
            context: "block_solve",
            expected: total,
            actual: e.len(),
        });
    }
    let mut x = Vec::with_capacity(e.len());
    let mut offset = 0;
    for (idx, block) in blocks.iter().enumerate() {
        let seg = &e[offset..offset + block.rows()];
        let factor = cholesky(block).map_err(|err| match err {
            Error::NotPositiveDefinite { .. } => Error::BlockNotPositiveDefinite { block: idx },
            other => other,
        })?;
        x.extend(solve_vec(&factor, seg)?);
        offset += block.rows();
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted in
/// descending order. Intended for diagnostics; O(n^3) per sweep.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>> {
    if a.rows() != a.cols() {
        return Err(Error::DimensionMismatch {
            context: "symmetric_eigenvalues",
            expected: a.rows(),
            actual: a.cols(),
        });
    }
    if let Some((i, j, diff)) = a.is_symmetric_within(1e-8) {
        return Err(Error::NotSymmetric { i, j, diff });
    }
    let n = a.rows();
    let mut m = a.clone();
    // Symmetrize exactly so rotations preserve symmetry bit-for-bit.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.at(i, j) + m.at(j, i));
            *m.at_mut(i, j) = v;
            *m.at_mut(j, i) = v;
        }
    }
    let scale: f64 = m.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.at(i, j) * m.at(i, j);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.at(k, p);
                    let akq = m.at(k, q);
                    *m.at_mut(k, p) = c * akp - s * akq;
                    *m.at_mut(k, q) = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m.at(p, k);
                    let aqk = m.at(q, k);
                    *m.at_mut(p, k) = c * apk - s * aqk;
                    *m.at_mut(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(eig)
}

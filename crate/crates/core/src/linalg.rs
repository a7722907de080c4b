//! Dense row-major matrices and the two factorizations the rest of the crate
//! needs: a Cholesky solve for the regularized normal equations and a cyclic
//! Jacobi eigensolver for small symmetric matrices.
//!
//! Samples are stored as columns throughout, so a feature matrix for `n`
//! inputs is `d × n` and targets are `o × n`.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking symmetry of solver inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "from_vec",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input, which is
    /// only ever a programming error at the call site.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows in Matrix::from_rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn add_diagonal(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Gathers the listed columns into a new matrix, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = &mut out.data[i * idx.len()..(i + 1) * idx.len()];
            for (d, &j) in dst.iter_mut().zip(idx) {
                *d = src[j];
            }
        }
        out
    }

    /// First `n` rows as a new matrix.
    pub fn top_rows(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    /// Appends a row filled with `value`.
    pub fn with_constant_row(&self, value: f64) -> Matrix {
        let mut data = Vec::with_capacity((self.rows + 1) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend(std::iter::repeat_n(value, self.cols));
        Matrix {
            rows: self.rows + 1,
            cols: self.cols,
            data,
        }
    }

    /// Column concatenation `[self, other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("hstack", self.rows, other.rows));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Largest absolute difference between `self` and its transpose,
    /// relative to the largest entry (1 when the matrix is tiny).
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let scale = self.max_abs().max(1.0);
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("lhs cols = rhs rows ({})", a.cols),
            format!("rhs rows = {}", b.rows),
        ));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dim("matmul_nt", a.cols, b.cols));
    }
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dim("matmul_tn", a.rows, b.rows));
    }
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let a_row = &a.data[p * n..(p + 1) * n];
        let b_row = &b.data[p * m..(p + 1) * m];
        for (i, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

pub fn transpose(a: &Matrix) -> Matrix {
    a.transpose()
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.sum_squares().sqrt()
}

/// Lower-triangular Cholesky factor `L` with `a = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factors `a`, which must be symmetric to [`SYMMETRY_TOL`]. No pivoting:
    /// callers are expected to regularize their systems.
    pub fn new(a: &Matrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::dim("cholesky", "square matrix", format!("{:?}", a.shape())));
        }
        let asym = a.asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let n = a.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) {
                return Err(Error::NotPositiveDefinite { index: j, pivot: diag });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    /// Solves `L Lᵀ X = b` column by column.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.l.rows;
        if b.rows != n {
            return Err(Error::dim("cholesky solve", n, b.rows));
        }
        let m = b.cols;
        let mut x = b.clone();
        // forward: L y = b
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[(i, k)];
                if lik == 0.0 {
                    continue;
                }
                for j in 0..m {
                    let v = x.data[k * m + j];
                    x.data[i * m + j] -= lik * v;
                }
            }
            let lii = self.l[(i, i)];
            for j in 0..m {
                x.data[i * m + j] /= lii;
            }
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = self.l[(k, i)];
                if lki == 0.0 {
                    continue;
                }
                for j in 0..m {
                    let v = x.data[k * m + j];
                    x.data[i * m + j] -= lki * v;
                }
            }
            let lii = self.l[(i, i)];
            for j in 0..m {
                x.data[i * m + j] /= lii;
            }
        }
        Ok(x)
    }
}

/// Solves `a X = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::dim("solve_spd", a.rows, b.rows));
    }
    Cholesky::new(a)?.solve(b)
}

/// Eigenvalues of a symmetric matrix in ascending order, by cyclic Jacobi
/// rotations.
pub fn sym_eigvals(a: &Matrix) -> Result<Vec<f64>> {
    let (vals, _) = jacobi(a, false)?;
    Ok(vals)
}

/// Eigenvalues (ascending) and the matching orthonormal eigenvectors as
/// columns.
pub fn sym_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (vals, vecs) = jacobi(a, true)?;
    Ok((vals, vecs.expect("eigenvectors requested")))
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn sym_spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(sym_eigvals(a)?
        .into_iter()
        .fold(0.0_f64, |m, v| m.max(v.abs())))
}

const JACOBI_MAX_SWEEPS: usize = 100;

fn jacobi(a: &Matrix, want_vectors: bool) -> Result<(Vec<f64>, Option<Matrix>)> {
    if a.rows != a.cols {
        return Err(Error::dim("sym_eigvals", "square matrix", format!("{:?}", a.shape())));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let n = a.rows;
    // symmetrize exactly so rotations act on a truly symmetric matrix
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = want_vectors.then(|| Matrix::identity(n));
    let total = m.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let vals = order.iter().map(|&i| m[(i, i)]).collect();
    let vecs = v.map(|v| Matrix::from_fn(n, n, |r, c| v[(r, order[c])]));
    Ok((vals, vecs))
}

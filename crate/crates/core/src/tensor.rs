//! Dense matrix primitives for order-2 tensors.
//!
//! Everything here works on column-major storage, so `vec` is the plain
//! storage order of a [`DMatrix`]: entry `(i, j)` lands at `i + j * rows`.
//! Coefficient and covariate matrices are always `p x p`; factor matrices
//! are `p x R` with one rank-1 component per column.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};

/// A finite, dense real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix(DMatrix<f64>);

impl DenseMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(dim_err("DenseMatrix::new", "empty matrix"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix"));
        }
        Ok(Self(m))
    }

    /// Build from row-major values, the way matrices are written in tests and files.
    pub fn from_rows(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(dim_err(
                "DenseMatrix::from_rows",
                format!("{} values for a {rows}x{cols} matrix", values.len()),
            ));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, values))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }
}

impl Deref for DenseMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// A square real matrix with `m[(i, j)] == m[(j, i)]` holding exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Accepts `m` only if it is square, finite and exactly symmetric.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let dev = check_square_finite(&m, "SymmetricMatrix::new")?;
        if dev > 0.0 {
            return Err(Error::Asymmetric { max_dev: dev });
        }
        Ok(Self(m))
    }

    /// Accepts `m` if its asymmetry is at most `tol`, then symmetrizes it.
    /// Returns the matrix together with the observed max deviation.
    pub fn with_tolerance(m: DMatrix<f64>, tol: f64) -> Result<(Self, f64)> {
        let dev = check_square_finite(&m, "SymmetricMatrix::with_tolerance")?;
        if dev > tol {
            return Err(Error::Asymmetric { max_dev: dev });
        }
        Ok((Self(symmetric_part(&m)), dev))
    }

    pub fn from_rows(p: usize, values: &[f64]) -> Result<Self> {
        Self::new(DenseMatrix::from_rows(p, p, values)?.into_inner())
    }

    pub fn zeros(p: usize) -> Self {
        Self(DMatrix::zeros(p, p))
    }

    pub fn identity(p: usize) -> Self {
        Self(DMatrix::identity(p, p))
    }

    /// Caller guarantees exact symmetry.
    pub(crate) fn from_raw(m: DMatrix<f64>) -> Self {
        debug_assert!(m.nrows() == m.ncols());
        Self(m)
    }

    pub fn p(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix(self.0.clone())
    }
}

impl Deref for SymmetricMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

fn check_square_finite(m: &DMatrix<f64>, op: &'static str) -> Result<f64> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(dim_err(
            op,
            format!("expected a non-empty square matrix, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SymmetricMatrix"));
    }
    let p = m.nrows();
    let mut dev = 0.0f64;
    for j in 0..p {
        for i in (j + 1)..p {
            dev = dev.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    Ok(dev)
}

// (M + M^T) / 2, written entrywise so the result is bit-exactly symmetric.
fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let p = m.nrows();
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p {
        out[(j, j)] = m[(j, j)];
        for i in (j + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Column-major vectorization.
pub fn vec(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<DenseMatrix> {
    if v.len() != rows * cols {
        return Err(dim_err("unvec", format!("{} values for {rows}x{cols}", v.len())));
    }
    DenseMatrix::new(DMatrix::from_column_slice(rows, cols, v))
}

/// Columnwise Kronecker product: column `r` is `a[:, r] ⊗ c[:, r]`.
pub fn khatri_rao(a: &DenseMatrix, c: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != c.cols() {
        return Err(dim_err(
            "khatri_rao",
            format!("column counts differ ({} vs {})", a.cols(), c.cols()),
        ));
    }
    let (p, q) = (a.rows(), c.rows());
    let out = DMatrix::from_fn(p * q, a.cols(), |row, r| a[(row / q, r)] * c[(row % q, r)]);
    Ok(DenseMatrix(out))
}

/// Frobenius inner product of two equally sized matrices.
pub(crate) fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `sum_ij x_ij * b_ij`.
pub fn inner(x: &SymmetricMatrix, b: &SymmetricMatrix) -> Result<f64> {
    if x.p() != b.p() {
        return Err(dim_err("inner", format!("p = {} vs {}", x.p(), b.p())));
    }
    Ok(frob(x, b))
}

pub(crate) fn symcp_raw(lambda: &[f64], b: &DMatrix<f64>) -> DMatrix<f64> {
    let p = b.nrows();
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p {
        for i in j..p {
            let v: f64 = lambda
                .iter()
                .enumerate()
                .map(|(r, l)| l * b[(i, r)] * b[(j, r)])
                .sum();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// `B diag(lambda) B^T = sum_r lambda_r b_r b_r^T`.
pub fn symcp_to_full(lambda: &[f64], b: &DenseMatrix) -> Result<SymmetricMatrix> {
    if lambda.len() != b.cols() {
        return Err(dim_err(
            "symcp_to_full",
            format!("{} weights for {} columns", lambda.len(), b.cols()),
        ));
    }
    Ok(SymmetricMatrix(symcp_raw(lambda, b)))
}

/// `B1 B2^T`.
pub fn cp_to_full(b1: &DenseMatrix, b2: &DenseMatrix) -> Result<DenseMatrix> {
    if b1.shape() != b2.shape() {
        return Err(dim_err(
            "cp_to_full",
            format!("{:?} vs {:?}", b1.shape(), b2.shape()),
        ));
    }
    Ok(DenseMatrix(b1.as_matrix() * b2.transpose()))
}

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &DenseMatrix) -> Result<SymmetricMatrix> {
    if m.rows() != m.cols() {
        return Err(dim_err(
            "symmetrize",
            format!("non-square {}x{}", m.rows(), m.cols()),
        ));
    }
    Ok(SymmetricMatrix(symmetric_part(m)))
}

pub(crate) fn design_sym_raw(x: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    let xb = x * b;
    DVector::from_fn(b.ncols(), |r, _| b.column(r).dot(&xb.column(r)))
}

/// Per-rank covariates `b_r^T X b_r` of the weight update.
pub fn design_sym(x: &SymmetricMatrix, b: &DenseMatrix) -> Result<Vec<f64>> {
    if x.p() != b.rows() {
        return Err(dim_err("design_sym", format!("p = {} vs {} rows", x.p(), b.rows())));
    }
    Ok(design_sym_raw(x, b).as_slice().to_vec())
}

/// Gradient of `<X, B diag(lambda) B^T>` with respect to `B`: `2 X B diag(lambda)`.
pub fn grad_eta_b(x: &SymmetricMatrix, lambda: &[f64], b: &DenseMatrix) -> Result<DenseMatrix> {
    if x.p() != b.rows() || lambda.len() != b.cols() {
        return Err(dim_err(
            "grad_eta_b",
            format!("X is {0}x{0}, B is {1}x{2}, {3} weights", x.p(), b.rows(), b.cols(), lambda.len()),
        ));
    }
    let mut g = x.as_matrix() * b.as_matrix();
    for (r, l) in lambda.iter().enumerate() {
        g.column_mut(r).scale_mut(2.0 * l);
    }
    Ok(DenseMatrix(g))
}

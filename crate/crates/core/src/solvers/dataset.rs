use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::glm::Family;
use crate::tensor::SymmetricMatrix;

/// `n` observations of a scalar response, a covariate vector and a symmetric
/// `p x p` matrix covariate.
#[derive(Debug, Clone)]
pub struct Dataset {
    ids: Vec<String>,
    y: Vec<f64>,
    z: DMatrix<f64>,
    xs: Vec<SymmetricMatrix>,
    // row i holds vec(X_i), so all linear predictors are one mat-vec
    xflat: DMatrix<f64>,
    family: Family,
}

impl Dataset {
    /// `z` is `n x p0` (`p0` may be zero).
    pub fn new(y: Vec<f64>, z: DMatrix<f64>, xs: Vec<SymmetricMatrix>, family: Family) -> Result<Self> {
        let ids = (0..y.len()).map(|i| format!("s{:04}", i + 1)).collect();
        Self::with_ids(ids, y, z, xs, family)
    }

    pub fn with_ids(
        ids: Vec<String>,
        y: Vec<f64>,
        z: DMatrix<f64>,
        xs: Vec<SymmetricMatrix>,
        family: Family,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
        }
        if z.nrows() != n || xs.len() != n || ids.len() != n {
            return Err(dim_err(
                "Dataset",
                format!("{n} responses, {} covariate rows, {} matrices, {} ids", z.nrows(), xs.len(), ids.len()),
            ));
        }
        let p = xs[0].p();
        if let Some(bad) = xs.iter().position(|x| x.p() != p) {
            return Err(dim_err("Dataset", format!("matrix {bad} is {0}x{0}, expected {p}x{p}", xs[bad].p())));
        }
        family.check_response(&y)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates"));
        }
        let mut xflat = DMatrix::zeros(n, p * p);
        for (i, x) in xs.iter().enumerate() {
            for (k, v) in x.iter().enumerate() {
                xflat[(i, k)] = *v;
            }
        }
        Ok(Self {
            ids,
            y,
            z,
            xs,
            xflat,
            family,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.xs[0].p()
    }

    pub fn p0(&self) -> usize {
        self.z.ncols()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn xs(&self) -> &[SymmetricMatrix] {
        &self.xs
    }

    /// Copy of the samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let p0 = self.p0();
        let z = DMatrix::from_fn(idx.len(), p0, |r, c| self.z[(idx[r], c)]);
        let xflat = DMatrix::from_fn(idx.len(), self.xflat.ncols(), |r, c| self.xflat[(idx[r], c)]);
        Dataset {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            z,
            xs: idx.iter().map(|&i| self.xs[i].clone()).collect(),
            xflat,
            family: self.family,
        }
    }

    /// `<coef, X_i>` for every sample; `coef` need not be symmetric.
    pub fn matrix_part(&self, coef: &DMatrix<f64>) -> DVector<f64> {
        debug_assert_eq!(coef.len(), self.xflat.ncols());
        let v = DVector::from_column_slice(coef.as_slice());
        &self.xflat * v
    }

    /// `gamma^T z_i` for every sample.
    pub fn covariate_part(&self, gamma: &[f64]) -> DVector<f64> {
        if gamma.is_empty() {
            return DVector::zeros(self.n());
        }
        &self.z * DVector::from_column_slice(gamma)
    }

    /// Linear predictors `gamma^T z_i + <coef, X_i>`.
    pub fn linear_predictor(&self, gamma: &[f64], coef: &DMatrix<f64>) -> DVector<f64> {
        self.covariate_part(gamma) + self.matrix_part(coef)
    }

    /// `sum_i w_i X_i`.
    pub(crate) fn weighted_sum(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let p = self.p();
        let v = self.xflat.tr_mul(w);
        DMatrix::from_column_slice(p, p, v.as_slice())
    }

    pub(crate) fn nll(&self, eta: &DVector<f64>) -> f64 {
        crate::glm::nll(self.family, &self.y, eta.as_slice())
    }

    pub(crate) fn scores(&self, eta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.y.iter().zip(eta.iter()).map(|(&y, &e)| self.family.unit_score(y, e)),
        )
    }
}

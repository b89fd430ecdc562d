use std::cmp::Ordering;

use nalgebra::DMatrix;

use super::{fit_cp, symmetrized, Dataset, FitConfig, FitResult, SymCpFactors};
use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, SymmetricMatrix};

/// Best rank-`rank` symmetric approximation `sum_r lambda_r b_r b_r^T` of
/// `b_sym` in Frobenius norm, via its eigen-decomposition.
///
/// Keeps the eigenpairs of largest `|eigenvalue|` (ties: larger signed value,
/// then lower index). Each eigenvector is signed so that its largest-magnitude
/// entry is positive, preferring the later entry on ties.
pub fn construct_init(b_sym: &SymmetricMatrix, rank: usize) -> Result<SymCpFactors> {
    let p = b_sym.p();
    if rank == 0 || rank > p {
        return Err(Error::InvalidArgument(format!("rank {rank} must lie in 1..={p}")));
    }
    let eig = b_sym.as_matrix().clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (eig.eigenvalues[a], eig.eigenvalues[b]);
        lb.abs()
            .partial_cmp(&la.abs())
            .unwrap_or(Ordering::Equal)
            .then(lb.partial_cmp(&la).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });

    let mut b = DMatrix::zeros(p, rank);
    let mut lambda = Vec::with_capacity(rank);
    for (r, &k) in order.iter().take(rank).enumerate() {
        lambda.push(eig.eigenvalues[k]);
        let mut v = eig.eigenvectors.column(k).clone_owned();
        let amax = v.amax();
        let pivot = (0..p).rev().find(|&i| v[i].abs() >= amax - 1e-12).unwrap_or(0);
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        b.set_column(r, &v);
    }
    SymCpFactors::new(lambda, DenseMatrix::new(b)?)
}

/// CP fit, symmetrization, eigen-decomposition initializer, then the
/// symmetric tensor fit. The CP and symmetrized CP results are attached as
/// baselines of the returned fit.
pub fn default_pipeline(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let cp = fit_cp(data, config)?;
    let sym_cp = symmetrized(&cp);
    let init = construct_init(&sym_cp.coef_full.symmetric(), config.rank)?;
    let mut fit = super::fit_sym_tensor(data, config, init)?;
    fit.baselines = vec![cp, sym_cp];
    Ok(fit)
}

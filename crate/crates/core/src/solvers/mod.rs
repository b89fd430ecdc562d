//! Estimators for the matrix-covariate regression model
//!
//! ```text
//! g(E[y_i]) = gamma^T z_i + <B, X_i>
//! ```
//!
//! * [`fit_cp`]: standard CP regression, `B = B1 B2^T`, fitted by alternating
//!   l1-penalized GLM updates of `B1` and `B2`.
//! * [`fit_sym_cp`]: the same fit reported as `(B + B^T) / 2`.
//! * [`fit_sym_tensor`]: the symmetric model `B = sum_r lambda_r b_r b_r^T`
//!   with an l1 penalty on the factor matrix, fitted by block updates of
//!   `gamma`, `lambda` and proximal-gradient steps on the factors.
//! * [`construct_init`] / [`default_pipeline`]: eigen-decomposition of the
//!   symmetrized CP estimate used as the starting point for the symmetric fit.

mod cp;
mod dataset;
mod init;
mod sym_tensor;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{cp_to_full, symcp_to_full, DenseMatrix, SymmetricMatrix};

pub use cp::{fit_cp, fit_sym_cp, symmetrized};
pub use dataset::Dataset;
pub use init::{construct_init, default_pipeline};
pub use sym_tensor::{
    fit_sym_tensor, grad_loss_b, objective, prox_update_b, random_init, ProxOutcome, SymTensorInit,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub rank: usize,
    pub rho: f64,
    pub max_outer_iters: usize,
    /// Stop when the relative change in objective drops below this.
    pub tol: f64,
    /// Proximal-gradient steps per factor update.
    pub prox_steps: usize,
    /// Initial step length of each line search.
    pub delta0: f64,
    pub line_search_max_halvings: usize,
    pub seed: u64,
    /// Rescale factor columns to unit norm after each update, folding the
    /// magnitude into the weights.
    pub renormalize_columns: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rank: 3,
            rho: 0.0,
            max_outer_iters: 200,
            tol: 1e-4,
            prox_steps: 5,
            delta0: 1.0,
            line_search_max_halvings: 50,
            seed: 0,
            renormalize_columns: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.rank == 0 {
            return bad("rank must be positive");
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return bad("rho must be finite and non-negative");
        }
        if self.max_outer_iters == 0 || self.prox_steps == 0 || self.line_search_max_halvings == 0 {
            return bad("iteration counts must be positive");
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad("tol must lie in (0, 1)");
        }
        if !(self.delta0 > 0.0) || !self.delta0.is_finite() {
            return bad("delta0 must be positive");
        }
        Ok(())
    }
}

/// Symmetric rank-R parameterization `sum_r lambda_r b_r b_r^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymCpFactors {
    pub lambda: Vec<f64>,
    pub b: DenseMatrix,
}

impl SymCpFactors {
    pub fn new(lambda: Vec<f64>, b: DenseMatrix) -> Result<Self> {
        if lambda.len() != b.cols() {
            return Err(dim_err("SymCpFactors", format!("{} weights for {} columns", lambda.len(), b.cols())));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lambda"));
        }
        Ok(Self { lambda, b })
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn full(&self) -> SymmetricMatrix {
        symcp_to_full(&self.lambda, &self.b).expect("shapes checked at construction")
    }
}

/// Standard rank-R CP parameterization `B1 B2^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    pub b1: DenseMatrix,
    pub b2: DenseMatrix,
}

impl CpFactors {
    pub fn new(b1: DenseMatrix, b2: DenseMatrix) -> Result<Self> {
        if b1.shape() != b2.shape() {
            return Err(dim_err("CpFactors", format!("{:?} vs {:?}", b1.shape(), b2.shape())));
        }
        Ok(Self { b1, b2 })
    }

    pub fn full(&self) -> DenseMatrix {
        cp_to_full(&self.b1, &self.b2).expect("shapes checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Cp,
    SymCp,
    SymTensor,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Cp => "cp",
            Estimator::SymCp => "sym_cp",
            Estimator::SymTensor => "sym_tensor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cp" => Some(Estimator::Cp),
            "sym_cp" | "sym-cp" => Some(Estimator::SymCp),
            "sym_tensor" | "sym-tensor" => Some(Estimator::SymTensor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factors {
    Sym(SymCpFactors),
    Cp(CpFactors),
}

/// Full coefficient matrix of a fit.
#[derive(Debug, Clone, PartialEq)]
pub enum Coef {
    Symmetric(SymmetricMatrix),
    General(DenseMatrix),
}

impl Coef {
    pub fn as_matrix(&self) -> &nalgebra::DMatrix<f64> {
        match self {
            Coef::Symmetric(s) => s.as_matrix(),
            Coef::General(d) => d.as_matrix(),
        }
    }

    /// The symmetric part; identical to the matrix itself for symmetric fits.
    pub fn symmetric(&self) -> SymmetricMatrix {
        match self {
            Coef::Symmetric(s) => s.clone(),
            Coef::General(d) => crate::tensor::symmetrize(d).expect("coefficient matrices are square"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// GLM sub-fits that needed the ridge fallback.
    pub ridged_updates: usize,
    /// Proximal steps whose line search ran out of halvings.
    pub line_search_failures: usize,
    /// Block updates rejected because they would have raised the objective.
    pub rejected_updates: usize,
    /// Largest factor column norm at the start and end of the fit.
    pub initial_factor_scale: f64,
    pub final_factor_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub estimator: Estimator,
    pub gamma: Vec<f64>,
    pub factors: Factors,
    pub coef_full: Coef,
    /// Penalized objective after each outer iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub config: FitConfig,
    pub diagnostics: Diagnostics,
    /// Fits computed on the way to this one (the pipeline attaches its CP baselines).
    pub baselines: Vec<FitResult>,
}

impl FitResult {
    /// Linear predictors `gamma^T z_i + <coef_full, X_i>` on `data`.
    pub fn linear_predictor(&self, data: &Dataset) -> Vec<f64> {
        data.linear_predictor(&self.gamma, self.coef_full.as_matrix())
            .as_slice()
            .to_vec()
    }

    /// Fitted means on `data`.
    pub fn predict(&self, data: &Dataset) -> Vec<f64> {
        let family = data.family();
        self.linear_predictor(data)
            .into_iter()
            .map(|e| family.mean(e))
            .collect()
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Number of nonzero entries in the (symmetric part of the) coefficient matrix.
    pub fn nonzero_count(&self) -> usize {
        self.coef_full.as_matrix().iter().filter(|v| **v != 0.0).count()
    }

    pub fn baseline(&self, estimator: Estimator) -> Option<&FitResult> {
        self.baselines.iter().find(|b| b.estimator == estimator)
    }
}

/// Fits `estimator`; the symmetric tensor fit starts from the constructed
/// initializer and carries the CP baselines it was built from.
pub fn fit(data: &Dataset, config: &FitConfig, estimator: Estimator) -> Result<FitResult> {
    match estimator {
        Estimator::Cp => fit_cp(data, config),
        Estimator::SymCp => fit_sym_cp(data, config),
        Estimator::SymTensor => default_pipeline(data, config),
    }
}

pub(crate) fn relative_change_small(prev: f64, cur: f64, tol: f64) -> bool {
    (prev - cur).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE)
}

pub(crate) fn max_column_norm(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

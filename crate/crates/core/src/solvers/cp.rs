use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    max_column_norm, relative_change_small, Coef, CpFactors, Dataset, Diagnostics, Estimator, Factors,
    FitConfig, FitResult,
};
use crate::error::{Error, Result};
use crate::glm::{fit_glm_from, fit_glm_lasso_from, GlmProblem};
use crate::tensor::DenseMatrix;

fn l1(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

struct CpState {
    gamma: Vec<f64>,
    b1: DMatrix<f64>,
    b2: DMatrix<f64>,
}

impl CpState {
    fn full(&self) -> DMatrix<f64> {
        &self.b1 * self.b2.transpose()
    }

    fn objective(&self, data: &Dataset, rho: f64) -> f64 {
        let eta = data.linear_predictor(&self.gamma, &self.full());
        data.nll(&eta) + rho * (l1(&self.b1) + l1(&self.b2))
    }
}

// Row i is vec(X_i F), so <vec(G), row_i> = <X_i, G F^T>.
fn factor_design(data: &Dataset, other: &DMatrix<f64>) -> DMatrix<f64> {
    let width = other.len();
    let mut d = DMatrix::zeros(data.n(), width);
    for (i, x) in data.xs().iter().enumerate() {
        let xf = x.as_matrix() * other;
        for (k, v) in xf.iter().enumerate() {
            d[(i, k)] = *v;
        }
    }
    d
}

enum Block {
    First,
    Second,
}

fn update_factor(data: &Dataset, st: &mut CpState, block: Block, rho: f64, diag: &mut Diagnostics) -> Result<()> {
    let before = st.objective(data, rho);
    let (target, other) = match block {
        Block::First => (&st.b1, &st.b2),
        Block::Second => (&st.b2, &st.b1),
    };
    let (p, r) = target.shape();
    let design = factor_design(data, other);
    let offset = data.covariate_part(&st.gamma);
    let prob = GlmProblem::new(data.y().to_vec(), design, offset.as_slice().to_vec(), data.family())?;
    let fit = fit_glm_lasso_from(&prob, rho, Some(target.as_slice()))?;
    diag.ridged_updates += fit.ridged as usize;
    let updated = DMatrix::from_column_slice(p, r, &fit.coef);
    let previous = match block {
        Block::First => std::mem::replace(&mut st.b1, updated),
        Block::Second => std::mem::replace(&mut st.b2, updated),
    };
    if st.objective(data, rho) > before {
        diag.rejected_updates += 1;
        match block {
            Block::First => st.b1 = previous,
            Block::Second => st.b2 = previous,
        }
    }
    Ok(())
}

fn update_gamma(data: &Dataset, st: &mut CpState, diag: &mut Diagnostics) -> Result<()> {
    if data.p0() == 0 {
        return Ok(());
    }
    let offset = data.matrix_part(&st.full());
    let prob = GlmProblem::new(data.y().to_vec(), data.z().clone(), offset.as_slice().to_vec(), data.family())?;
    let before = prob.loss(&st.gamma);
    let fit = fit_glm_from(&prob, Some(&st.gamma))?;
    diag.ridged_updates += fit.ridged as usize;
    if prob.loss(&fit.coef) <= before {
        st.gamma = fit.coef;
    } else {
        diag.rejected_updates += 1;
    }
    Ok(())
}

/// Standard rank-R CP regression with l1 penalties on both factor matrices.
///
/// Both factors start from i.i.d. standard normal entries drawn from
/// `config.seed`; each block update of a factor is an l1-penalized GLM on the
/// covariates `vec(X_i F)` where `F` is the other factor.
pub fn fit_cp(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let (p, rank) = (data.p(), config.rank);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |_, _| -> f64 { StandardNormal.sample(&mut rng) };
    let b1 = DMatrix::from_fn(p, rank, &mut draw);
    let b2 = DMatrix::from_fn(p, rank, &mut draw);
    let mut st = CpState {
        gamma: vec![0.0; data.p0()],
        b1,
        b2,
    };
    let mut diag = Diagnostics {
        initial_factor_scale: max_column_norm(&st.b1).max(max_column_norm(&st.b2)),
        ..Diagnostics::default()
    };

    let rho = config.rho;
    let mut prev = st.objective(data, rho);
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 1..=config.max_outer_iters {
        update_gamma(data, &mut st, &mut diag)?;
        update_factor(data, &mut st, Block::First, rho, &mut diag)?;
        update_factor(data, &mut st, Block::Second, rho, &mut diag)?;
        let obj = st.objective(data, rho);
        if !obj.is_finite() {
            return Err(Error::NumericalFailure { iteration: iter });
        }
        trace.push(obj);
        if relative_change_small(prev, obj, config.tol) {
            converged = true;
            break;
        }
        prev = obj;
    }
    diag.final_factor_scale = max_column_norm(&st.b1).max(max_column_norm(&st.b2));

    let factors = CpFactors::new(DenseMatrix::new(st.b1)?, DenseMatrix::new(st.b2)?)?;
    Ok(FitResult {
        estimator: Estimator::Cp,
        gamma: st.gamma,
        coef_full: Coef::General(factors.full()),
        factors: Factors::Cp(factors),
        iterations: trace.len(),
        objective_trace: trace,
        converged,
        config: config.clone(),
        diagnostics: diag,
        baselines: vec![],
    })
}

/// Re-expresses a CP fit with its coefficient matrix symmetrized. On symmetric
/// covariates the linear predictors are unchanged.
pub fn symmetrized(cp: &FitResult) -> FitResult {
    let coef = cp.coef_full.symmetric();
    FitResult {
        estimator: Estimator::SymCp,
        coef_full: Coef::Symmetric(coef),
        ..cp.clone()
    }
}

/// CP regression followed by symmetrization of the coefficient matrix.
pub fn fit_sym_cp(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    fit_cp(data, config).map(|f| symmetrized(&f))
}

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    max_column_norm, relative_change_small, Coef, Dataset, Diagnostics, Estimator, Factors, FitConfig,
    FitResult, SymCpFactors,
};
use crate::error::{dim_err, Error, Result};
use crate::glm::{fit_glm_from, shrink, GlmProblem};
use crate::tensor::{design_sym_raw, symcp_raw, DenseMatrix};

/// Starting point for [`fit_sym_tensor`].
#[derive(Debug, Clone)]
pub enum SymTensorInit {
    /// Weights and factor columns.
    Factors(SymCpFactors),
    /// Factor columns only; the weights come from one unpenalized weight update.
    Columns(DenseMatrix),
}

impl From<SymCpFactors> for SymTensorInit {
    fn from(f: SymCpFactors) -> Self {
        SymTensorInit::Factors(f)
    }
}

impl From<DenseMatrix> for SymTensorInit {
    fn from(b: DenseMatrix) -> Self {
        SymTensorInit::Columns(b)
    }
}

/// `p x rank` factor columns with i.i.d. standard normal entries.
pub fn random_init(p: usize, rank: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::new(DMatrix::from_fn(p, rank, |_, _| StandardNormal.sample(&mut rng)))
        .expect("normal draws are finite")
}

fn check_shapes(data: &Dataset, gamma: &[f64], factors: &SymCpFactors) -> Result<()> {
    if gamma.len() != data.p0() || factors.b.rows() != data.p() {
        return Err(dim_err(
            "symmetric tensor fit",
            format!(
                "data has p0={}, p={}; got {} covariate coefficients and {} factor rows",
                data.p0(),
                data.p(),
                gamma.len(),
                factors.b.rows()
            ),
        ));
    }
    Ok(())
}

fn l1(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Unpenalized loss as a function of the factor matrix with `gamma` and
/// `lambda` held fixed.
struct FactorLoss<'a> {
    data: &'a Dataset,
    base: DVector<f64>,
    lambda: &'a [f64],
}

impl<'a> FactorLoss<'a> {
    fn new(data: &'a Dataset, gamma: &[f64], lambda: &'a [f64]) -> Self {
        Self {
            data,
            base: data.covariate_part(gamma),
            lambda,
        }
    }

    fn eta(&self, b: &DMatrix<f64>) -> DVector<f64> {
        &self.base + self.data.matrix_part(&symcp_raw(self.lambda, b))
    }

    fn value(&self, b: &DMatrix<f64>) -> f64 {
        self.data.nll(&self.eta(b))
    }

    // sum_i score_i * 2 X_i B diag(lambda)
    fn gradient(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let scores = self.data.scores(&self.eta(b));
        let m = self.data.weighted_sum(&scores);
        let mut g = m * b;
        for (r, l) in self.lambda.iter().enumerate() {
            g.column_mut(r).scale_mut(2.0 * l);
        }
        g
    }
}

/// Penalized objective `negloglik + rho * ||B||_1`; the penalty touches the
/// factor matrix only.
pub fn objective(data: &Dataset, gamma: &[f64], factors: &SymCpFactors, rho: f64) -> Result<f64> {
    check_shapes(data, gamma, factors)?;
    let loss = FactorLoss::new(data, gamma, &factors.lambda);
    Ok(loss.value(&factors.b) + rho * l1(&factors.b))
}

/// Gradient of the unpenalized negative log-likelihood with respect to the
/// factor matrix.
pub fn grad_loss_b(data: &Dataset, gamma: &[f64], factors: &SymCpFactors) -> Result<DenseMatrix> {
    check_shapes(data, gamma, factors)?;
    let loss = FactorLoss::new(data, gamma, &factors.lambda);
    DenseMatrix::new(loss.gradient(&factors.b))
}

#[derive(Debug, Clone)]
pub struct ProxOutcome {
    pub b: DenseMatrix,
    /// Step length accepted by each completed proximal step.
    pub accepted_steps: Vec<f64>,
    /// Steps abandoned because the line search ran out of halvings.
    pub failures: usize,
}

/// Runs `config.prox_steps` proximal-gradient steps on the factor matrix.
///
/// Each step restarts its line search from `config.delta0` and halves the
/// step until the candidate satisfies the quadratic majorization condition;
/// candidates are always recomputed from the iterate at the start of the step.
pub fn prox_update_b(
    data: &Dataset,
    gamma: &[f64],
    factors: &SymCpFactors,
    rho: f64,
    config: &FitConfig,
) -> Result<ProxOutcome> {
    check_shapes(data, gamma, factors)?;
    let loss = FactorLoss::new(data, gamma, &factors.lambda);
    Ok(prox_steps(&loss, factors.b.as_matrix().clone(), rho, config))
}

fn prox_steps(loss: &FactorLoss<'_>, mut s: DMatrix<f64>, rho: f64, config: &FitConfig) -> ProxOutcome {
    let mut accepted_steps = Vec::with_capacity(config.prox_steps);
    let mut failures = 0;
    let mut fs = loss.value(&s);
    for _ in 0..config.prox_steps {
        let grad = loss.gradient(&s);
        let penalty = rho * l1(&s);
        let mut delta = config.delta0;
        let mut accepted = false;
        for _ in 0..=config.line_search_max_halvings {
            let cand = (&s - &grad * delta).map(|v| shrink(v, rho * delta));
            let fc = loss.value(&cand);
            let d = &cand - &s;
            let bound = fs + grad.dot(&d) + d.norm_squared() / (2.0 * delta);
            if fc.is_finite() && fc <= bound && fc + rho * l1(&cand) <= fs + penalty {
                s = cand;
                fs = fc;
                accepted = true;
                break;
            }
            delta *= 0.5;
        }
        if accepted {
            accepted_steps.push(delta);
        } else {
            failures += 1;
            break;
        }
    }
    ProxOutcome {
        b: DenseMatrix::new(s).expect("accepted iterates are finite"),
        accepted_steps,
        failures,
    }
}

// Weight design: column r holds b_r^T X_i b_r.
fn weight_design(data: &Dataset, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(data.n(), b.ncols());
    for (i, x) in data.xs().iter().enumerate() {
        d.row_mut(i).copy_from(&design_sym_raw(x, b).transpose());
    }
    d
}

struct State {
    gamma: Vec<f64>,
    lambda: Vec<f64>,
    b: DMatrix<f64>,
}

impl State {
    fn eta(&self, data: &Dataset) -> DVector<f64> {
        data.linear_predictor(&self.gamma, &symcp_raw(&self.lambda, &self.b))
    }

    fn objective(&self, data: &Dataset, rho: f64) -> f64 {
        data.nll(&self.eta(data)) + rho * l1(&self.b)
    }
}

/// Covariate-coefficient update: GLM on `z` with offset `<B, X_i>`.
fn update_gamma(data: &Dataset, st: &mut State, diag: &mut Diagnostics) -> Result<()> {
    if data.p0() == 0 {
        return Ok(());
    }
    let offset = data.matrix_part(&symcp_raw(&st.lambda, &st.b));
    let before = data.nll(&(data.covariate_part(&st.gamma) + &offset));
    let prob = GlmProblem::new(data.y().to_vec(), data.z().clone(), offset.as_slice().to_vec(), data.family())?;
    let fit = fit_glm_from(&prob, Some(&st.gamma))?;
    diag.ridged_updates += fit.ridged as usize;
    if prob.loss(&fit.coef) <= before {
        st.gamma = fit.coef;
    } else {
        diag.rejected_updates += 1;
    }
    Ok(())
}

/// Weight update: GLM on `b_r^T X_i b_r` with offset `gamma^T z_i`.
fn update_lambda(data: &Dataset, st: &mut State, diag: &mut Diagnostics, force: bool) -> Result<()> {
    let design = weight_design(data, &st.b);
    let offset = data.covariate_part(&st.gamma);
    let prob = GlmProblem::new(data.y().to_vec(), design, offset.as_slice().to_vec(), data.family())?;
    let fit = fit_glm_from(&prob, Some(&st.lambda))?;
    diag.ridged_updates += fit.ridged as usize;
    if force || prob.loss(&fit.coef) <= prob.loss(&st.lambda) {
        st.lambda = fit.coef;
    } else {
        diag.rejected_updates += 1;
    }
    Ok(())
}

fn renormalize(st: &mut State) {
    for r in 0..st.b.ncols() {
        let norm = st.b.column(r).norm();
        if norm > 0.0 {
            st.lambda[r] *= norm * norm;
            st.b.column_mut(r).unscale_mut(norm);
        }
    }
}

/// Fits the sparse symmetric low-rank model by block updates of the
/// covariate coefficients, the weights and the factor matrix.
pub fn fit_sym_tensor(data: &Dataset, config: &FitConfig, init: impl Into<SymTensorInit>) -> Result<FitResult> {
    config.validate()?;
    let mut diag = Diagnostics::default();
    let (b0, lambda0) = match init.into() {
        SymTensorInit::Factors(f) => (f.b.into_inner(), Some(f.lambda)),
        SymTensorInit::Columns(b) => (b.into_inner(), None),
    };
    if b0.nrows() != data.p() {
        return Err(dim_err(
            "fit_sym_tensor",
            format!("initial factors have {} rows, data has p = {}", b0.nrows(), data.p()),
        ));
    }
    let rank = b0.ncols();
    let mut st = State {
        gamma: vec![0.0; data.p0()],
        lambda: lambda0.clone().unwrap_or_else(|| vec![0.0; rank]),
        b: b0,
    };
    if lambda0.is_none() {
        update_lambda(data, &mut st, &mut diag, true)?;
    }
    diag.initial_factor_scale = max_column_norm(&st.b);

    let rho = config.rho;
    let mut prev = st.objective(data, rho);
    if !prev.is_finite() {
        return Err(Error::NumericalFailure { iteration: 0 });
    }
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 1..=config.max_outer_iters {
        update_gamma(data, &mut st, &mut diag)?;
        update_lambda(data, &mut st, &mut diag, false)?;

        let loss = FactorLoss::new(data, &st.gamma, &st.lambda);
        let out = prox_steps(&loss, st.b.clone(), rho, config);
        diag.line_search_failures += out.failures;
        st.b = out.b.into_inner();
        if config.renormalize_columns {
            renormalize(&mut st);
        }

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
    diag.final_factor_scale = max_column_norm(&st.b);

    let factors = SymCpFactors::new(st.lambda, DenseMatrix::new(st.b).map_err(|_| Error::NumericalFailure {
        iteration: trace.len(),
    })?)?;
    let coef_full = Coef::Symmetric(factors.full());
    Ok(FitResult {
        estimator: Estimator::SymTensor,
        gamma: st.gamma,
        factors: Factors::Sym(factors),
        coef_full,
        iterations: trace.len(),
        objective_trace: trace,
        converged,
        config: config.clone(),
        diagnostics: diag,
        baselines: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::Family;
    use crate::tensor::SymmetricMatrix;
    use crate::simulate::random_correlation;

    fn dm(rows: usize, cols: usize, v: &[f64]) -> DenseMatrix {
        DenseMatrix::from_rows(rows, cols, v).unwrap()
    }

    fn one_sample(y: f64, x: SymmetricMatrix) -> Dataset {
        Dataset::new(vec![y], DMatrix::zeros(1, 0), vec![x], Family::Gaussian).unwrap()
    }

    fn random_dataset(n: usize, p: usize, p0: usize, family: Family, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<_> = (0..n).map(|_| random_correlation(p, &mut rng)).collect();
        let z = DMatrix::from_fn(n, p0, |_, _| StandardNormal.sample(&mut rng));
        let y = (0..n)
            .map(|_| {
                let u: f64 = StandardNormal.sample(&mut rng);
                match family {
                    Family::Gaussian => u,
                    Family::Bernoulli => (u > 0.0) as u8 as f64,
                }
            })
            .collect();
        Dataset::new(y, z, xs, family).unwrap()
    }

    #[test]
    fn objective_examples() {
        let x = SymmetricMatrix::from_rows(2, &[1.0, 0.3, 0.3, 1.0]).unwrap();
        let f = SymCpFactors::new(vec![0.5], dm(2, 1, &[1.0, -1.0])).unwrap();
        let eta = crate::tensor::inner(&x, &f.full()).unwrap();
        let data = one_sample(eta, x.clone());
        assert!(objective(&data, &[], &f, 0.0).unwrap().abs() < 1e-15);

        let zero = SymCpFactors::new(vec![3.0], DenseMatrix::zeros(2, 1)).unwrap();
        let data = one_sample(2.0, x.clone());
        assert_eq!(objective(&data, &[], &zero, 0.0).unwrap(), 2.0);

        let b = SymCpFactors::new(vec![1.0, 1.0], dm(2, 2, &[1.0, -2.0, 0.0, 3.0])).unwrap();
        let base = objective(&data, &[], &b, 0.0).unwrap();
        let pen = objective(&data, &[], &b, 1.0).unwrap();
        assert!((pen - base - 6.0).abs() < 1e-12);
    }

    #[test]
    fn grad_examples() {
        let x = SymmetricMatrix::from_rows(2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let f = SymCpFactors::new(vec![1.0], dm(2, 1, &[1.0, 0.0])).unwrap();
        // eta = 0 = y
        let g = grad_loss_b(&one_sample(0.0, x.clone()), &[], &f).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        // mu - y = 1 -> 2 X B Lambda
        let g = grad_loss_b(&one_sample(-1.0, x.clone()), &[], &f).unwrap();
        assert_eq!(g, dm(2, 1, &[0.0, 2.0]));
        let f0 = SymCpFactors::new(vec![0.0], dm(2, 1, &[1.0, 0.0])).unwrap();
        let g = grad_loss_b(&one_sample(-1.0, x), &[], &f0).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (k, family) in [Family::Gaussian, Family::Bernoulli].into_iter().enumerate() {
            for (p, r) in [(3, 1), (5, 2), (8, 3)] {
                let data = random_dataset(15, p, 2, family, 100 + k as u64 * 10 + p as u64);
                let gamma = vec![0.2, -0.1];
                let lambda: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
                let b = random_init(p, r, rand::RngCore::next_u64(&mut rng));
                let f = SymCpFactors::new(lambda.clone(), b.clone()).unwrap();
                let g = grad_loss_b(&data, &gamma, &f).unwrap();
                let h = 1e-5;
                for idx in 0..p * r {
                    let mut plus = b.as_matrix().clone();
                    plus[idx] += h;
                    let mut minus = b.as_matrix().clone();
                    minus[idx] -= h;
                    let fp = objective(&data, &gamma, &SymCpFactors::new(lambda.clone(), DenseMatrix::new(plus).unwrap()).unwrap(), 0.0).unwrap();
                    let fm = objective(&data, &gamma, &SymCpFactors::new(lambda.clone(), DenseMatrix::new(minus).unwrap()).unwrap(), 0.0).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    let scale = fd.abs().max(g[idx].abs()).max(1.0);
                    assert!((fd - g[idx]).abs() <= 1e-5 * scale, "{family:?} p={p} r={r} idx={idx}: {fd} vs {}", g[idx]);
                }
            }
        }
    }

    #[test]
    fn huge_penalty_zeroes_factors_in_one_step() {
        let data = random_dataset(20, 4, 1, Family::Gaussian, 1);
        let f = SymCpFactors::new(vec![1.0, -0.5], random_init(4, 2, 3)).unwrap();
        let cfg = FitConfig { prox_steps: 1, ..FitConfig::default() };
        let out = prox_update_b(&data, &[0.0], &f, 1e12, &cfg).unwrap();
        assert!(out.b.iter().all(|v| *v == 0.0));
        assert_eq!(out.failures, 0);
    }

    #[test]
    fn perfect_fit_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<_> = (0..10).map(|_| random_correlation(3, &mut rng)).collect();
        let f = SymCpFactors::new(vec![1.5], random_init(3, 1, 8)).unwrap();
        let y: Vec<f64> = xs.iter().map(|x| crate::tensor::inner(x, &f.full()).unwrap()).collect();
        let data = Dataset::new(y, DMatrix::zeros(10, 0), xs, Family::Gaussian).unwrap();
        let out = prox_update_b(&data, &[], &f, 0.0, &FitConfig::default()).unwrap();
        for (a, b) in out.b.iter().zip(f.b.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_prox_step_matches_brute_force() {
        // p = R = 1, X = [[1]], lambda = 1: loss(b) = (y - b^2)^2 / 2
        let (y, b0, rho) = (2.0, 0.6, 0.3);
        let data = one_sample(y, SymmetricMatrix::identity(1));
        let f = SymCpFactors::new(vec![1.0], dm(1, 1, &[b0])).unwrap();
        let cfg = FitConfig { prox_steps: 1, ..FitConfig::default() };
        let out = prox_update_b(&data, &[], &f, rho, &cfg).unwrap();
        let delta = out.accepted_steps[0];
        let grad = -2.0 * b0 * (y - b0 * b0);
        let surrogate = |u: f64| (u - (b0 - delta * grad)).powi(2) / (2.0 * delta) + rho * u.abs();
        let best = (-50_000..=50_000)
            .map(|k| k as f64 * 1e-4)
            .min_by(|a, b| surrogate(*a).partial_cmp(&surrogate(*b)).unwrap())
            .unwrap();
        assert!((out.b[0] - best).abs() <= 1e-3, "{} vs {best}", out.b[0]);
        // and the step decreased the penalized objective
        let before = objective(&data, &[], &f, rho).unwrap();
        let after = objective(&data, &[], &SymCpFactors::new(vec![1.0], out.b).unwrap(), rho).unwrap();
        assert!(after < before);
    }

    #[test]
    fn noiseless_truth_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, p) = (60, 5);
        let xs: Vec<_> = (0..n).map(|_| random_correlation(p, &mut rng)).collect();
        let z = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let truth = SymCpFactors::new(vec![2.0], random_init(p, 1, 77)).unwrap();
        let gamma = [1.0, -0.5];
        let y: Vec<f64> = (0..n)
            .map(|i| gamma[0] * z[(i, 0)] + gamma[1] * z[(i, 1)] + crate::tensor::inner(&xs[i], &truth.full()).unwrap())
            .collect();
        let data = Dataset::new(y, z, xs, Family::Gaussian).unwrap();
        let fit = fit_sym_tensor(&data, &FitConfig { rank: 1, ..FitConfig::default() }, truth).unwrap();
        assert!(fit.iterations <= 2, "{} iterations", fit.iterations);
        assert!(fit.final_objective() <= 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn objective_trace_is_monotone() {
        for (seed, rho) in [(1u64, 0.0), (2, 0.5), (3, 5.0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, p) = (80, 6);
            let xs: Vec<_> = (0..n).map(|_| random_correlation(p, &mut rng)).collect();
            let truth = SymCpFactors::new(vec![1.0, -1.0], random_init(p, 2, seed + 50)).unwrap();
            let y: Vec<f64> = xs
                .iter()
                .map(|x| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    crate::tensor::inner(x, &truth.full()).unwrap() + 0.3 * e
                })
                .collect();
            let data = Dataset::new(y, DMatrix::zeros(n, 0), xs, Family::Gaussian).unwrap();
            let cfg = FitConfig { rank: 2, rho, ..FitConfig::default() };
            let fit = fit_sym_tensor(&data, &cfg, SymTensorInit::Columns(random_init(p, 2, seed))).unwrap();
            let start = fit.objective_trace[0];
            assert!(start.is_finite());
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "{w:?}");
            }
            // coef_full reproduces the factors and the predictions
            if let Factors::Sym(f) = &fit.factors {
                let diff = (f.full().as_matrix() - fit.coef_full.as_matrix()).amax();
                assert!(diff <= 1e-12);
            }
        }
    }

    #[test]
    fn voided_rank_stays_void() {
        let data = random_dataset(40, 3, 0, Family::Gaussian, 5);
        let mut b = DMatrix::zeros(3, 2);
        b[(0, 0)] = 1.0;
        let fit = fit_sym_tensor(
            &data,
            &FitConfig { rank: 2, ..FitConfig::default() },
            SymTensorInit::Columns(DenseMatrix::new(b).unwrap()),
        )
        .unwrap();
        let Factors::Sym(f) = &fit.factors else { unreachable!() };
        assert_eq!(f.lambda[1], 0.0);
        assert!(f.b.column(1).iter().all(|v| *v == 0.0));
        assert!(fit.diagnostics.ridged_updates > 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let data = random_dataset(5, 3, 1, Family::Gaussian, 2);
        let f = SymCpFactors::new(vec![1.0], random_init(4, 1, 0)).unwrap();
        assert!(objective(&data, &[0.0], &f, 0.0).is_err());
        assert!(grad_loss_b(&data, &[], &SymCpFactors::new(vec![1.0], random_init(3, 1, 0)).unwrap()).is_err());
        assert!(fit_sym_tensor(&data, &FitConfig::default(), f).is_err());
    }
}

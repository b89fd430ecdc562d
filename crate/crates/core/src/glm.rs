//! Exponential-family pieces: likelihoods, unpenalized GLM fits with offsets
//! and the l1-penalized fit used by the CP baselines.
//!
//! Both supported families use their canonical link, so the derivative of
//! the negative log-likelihood with respect to the linear predictor is
//! simply `mu - y`. Gaussian dispersion is held at 1 throughout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

const RIDGE: f64 = 1e-8;
const IRLS_MAX_ITERS: usize = 100;
const IRLS_GRAD_TOL: f64 = 1e-8;
const LASSO_MAX_ITERS: usize = 20_000;
const LASSO_KKT_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Family {
    #[default]
    #[serde(rename = "gaussian-identity", alias = "gaussian")]
    Gaussian,
    #[serde(rename = "bernoulli-logit", alias = "bernoulli")]
    Bernoulli,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian-identity",
            Family::Bernoulli => "bernoulli-logit",
        }
    }

    /// Inverse link.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Bernoulli => sigmoid(eta),
        }
    }

    /// d mu / d eta.
    pub fn mean_deriv(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Bernoulli => {
                let mu = sigmoid(eta);
                mu * (1.0 - mu)
            }
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Bernoulli => mu * (1.0 - mu),
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Bernoulli => (mu / (1.0 - mu)).ln(),
        }
    }

    /// Negative log-likelihood contribution of one observation, up to constants.
    pub fn unit_nll(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * (y - eta) * (y - eta),
            Family::Bernoulli => softplus(eta) - y * eta,
        }
    }

    /// d unit_nll / d eta, i.e. `(mu - y) mu'(eta) / V(mu)`.
    pub fn unit_score(self, y: f64, eta: f64) -> f64 {
        self.mean(eta) - y
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" | "gaussian-identity" => Some(Family::Gaussian),
            "bernoulli" | "bernoulli-logit" | "binomial" => Some(Family::Bernoulli),
            _ => None,
        }
    }

    pub fn check_response(self, y: &[f64]) -> Result<()> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response"));
        }
        if self == Family::Bernoulli && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(
                "bernoulli responses must be 0 or 1".into(),
            ));
        }
        Ok(())
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Negative log-likelihood of `y` under linear predictor `eta`.
pub fn negloglik(family: Family, y: &[f64], eta: &[f64]) -> Result<f64> {
    if y.len() != eta.len() {
        return Err(dim_err("negloglik", format!("{} responses, {} predictors", y.len(), eta.len())));
    }
    if y.iter().chain(eta).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("negloglik input"));
    }
    Ok(nll(family, y, eta))
}

pub(crate) fn nll(family: Family, y: &[f64], eta: &[f64]) -> f64 {
    y.iter().zip(eta).map(|(&y, &e)| family.unit_nll(y, e)).sum()
}

/// Elementwise `sign(x) * max(|x| - t, 0)`.
pub fn soft_threshold(v: &[f64], t: f64) -> Result<Vec<f64>> {
    check_threshold(t)?;
    Ok(v.iter().map(|&x| shrink(x, t)).collect())
}

pub fn soft_threshold_matrix(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_threshold(t)?;
    Ok(m.map(|x| shrink(x, t)))
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {t}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn shrink(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// A response with an `n x q` design and a fixed offset in the linear predictor.
#[derive(Debug, Clone)]
pub struct GlmProblem {
    pub y: Vec<f64>,
    pub z: DMatrix<f64>,
    pub offset: Vec<f64>,
    pub family: Family,
}

impl GlmProblem {
    pub fn new(y: Vec<f64>, z: DMatrix<f64>, offset: Vec<f64>, family: Family) -> Result<Self> {
        if z.nrows() != y.len() || offset.len() != y.len() {
            return Err(dim_err(
                "GlmProblem",
                format!("{} responses, {} design rows, {} offsets", y.len(), z.nrows(), offset.len()),
            ));
        }
        family.check_response(&y)?;
        if z.iter().chain(&offset).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GLM design"));
        }
        Ok(Self { y, z, offset, family })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    fn eta(&self, coef: &DVector<f64>) -> DVector<f64> {
        &self.z * coef + DVector::from_column_slice(&self.offset)
    }

    /// Negative log-likelihood at `coef`.
    pub fn loss(&self, coef: &[f64]) -> f64 {
        let eta = self.eta(&DVector::from_column_slice(coef));
        nll(self.family, &self.y, eta.as_slice())
    }

    /// Gradient of [`GlmProblem::loss`] with respect to the coefficients.
    pub fn gradient(&self, coef: &[f64]) -> Vec<f64> {
        let eta = self.eta(&DVector::from_column_slice(coef));
        let score = self.score(&eta);
        (self.z.transpose() * score).as_slice().to_vec()
    }

    fn score(&self, eta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.y.iter().zip(eta.iter()).map(|(&y, &e)| self.family.unit_score(y, e)),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coef: Vec<f64>,
    /// The normal equations were singular and a small ridge was added.
    pub ridged: bool,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized objective after each accepted iterate (lasso only).
    pub trace: Vec<f64>,
}

/// Solves `a x = b` for symmetric positive semidefinite `a`, falling back to
/// `a + ridge * I` when `a` is singular or close to it.
pub(crate) fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let q = a.nrows();
    let scale = a.diagonal().iter().cloned().fold(0.0f64, f64::max).max(1.0);
    if let Some(chol) = a.clone().cholesky() {
        let l = chol.l_dirty();
        let well_posed = (0..q).all(|i| l[(i, i)] * l[(i, i)] > 1e-13 * scale);
        if well_posed {
            let mut x = chol.solve(b);
            // one step of iterative refinement
            let r = b - a * &x;
            x += chol.solve(&r);
            return (x, false);
        }
    }
    let mut reg = a.clone();
    for i in 0..q {
        reg[(i, i)] += RIDGE * scale;
    }
    let chol = reg
        .clone()
        .cholesky()
        .expect("ridge-regularized Gram matrix is positive definite");
    let mut x = chol.solve(b);
    let r = b - &reg * &x;
    x += chol.solve(&r);
    (x, true)
}

/// Unpenalized maximum likelihood fit.
pub fn fit_glm(problem: &GlmProblem) -> Result<GlmFit> {
    fit_glm_from(problem, None)
}

/// As [`fit_glm`], optionally warm-started (only used by the iterative families).
pub fn fit_glm_from(problem: &GlmProblem, start: Option<&[f64]>) -> Result<GlmFit> {
    let q = problem.q();
    if q == 0 {
        return Ok(GlmFit {
            coef: vec![],
            ridged: false,
            iterations: 0,
            converged: true,
            trace: vec![],
        });
    }
    match problem.family {
        Family::Gaussian => {
            let resid = DVector::from_iterator(
                problem.n(),
                problem.y.iter().zip(&problem.offset).map(|(y, o)| y - o),
            );
            let gram = problem.z.transpose() * &problem.z;
            let rhs = problem.z.transpose() * resid;
            let (coef, ridged) = solve_psd(&gram, &rhs);
            Ok(GlmFit {
                coef: coef.as_slice().to_vec(),
                ridged,
                iterations: 1,
                converged: true,
                trace: vec![],
            })
        }
        Family::Bernoulli => irls(problem, start),
    }
}

fn irls(problem: &GlmProblem, start: Option<&[f64]>) -> Result<GlmFit> {
    let q = problem.q();
    let mut coef = match start {
        Some(s) if s.len() == q => DVector::from_column_slice(s),
        _ => DVector::zeros(q),
    };
    let mut eta = problem.eta(&coef);
    let mut obj = nll(problem.family, &problem.y, eta.as_slice());
    let mut ridged = false;
    let mut strikes = 0;
    for iter in 0..IRLS_MAX_ITERS {
        let score = problem.score(&eta);
        let grad = problem.z.transpose() * &score;
        if grad.amax() <= IRLS_GRAD_TOL {
            return Ok(GlmFit {
                coef: coef.as_slice().to_vec(),
                ridged,
                iterations: iter,
                converged: true,
                trace: vec![],
            });
        }
        let mut wz = problem.z.clone();
        for (i, e) in eta.iter().enumerate() {
            let w = problem.family.mean_deriv(*e);
            wz.row_mut(i).scale_mut(w);
        }
        let hess = problem.z.transpose() * wz;
        let (step, r) = solve_psd(&hess, &grad);
        ridged |= r;

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &coef - &step * t;
            let cand_eta = problem.eta(&cand);
            let cand_obj = nll(problem.family, &problem.y, cand_eta.as_slice());
            if cand_obj.is_finite() && cand_obj <= obj {
                coef = cand;
                eta = cand_eta;
                obj = cand_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if accepted {
            strikes = 0;
        } else {
            strikes += 1;
            if strikes >= 2 {
                return Err(Error::Convergence(format!(
                    "IRLS step-halving exhausted twice (iteration {iter}, gradient {:e})",
                    grad.amax()
                )));
            }
        }
    }
    Ok(GlmFit {
        coef: coef.as_slice().to_vec(),
        ridged,
        iterations: IRLS_MAX_ITERS,
        converged: false,
        trace: vec![],
    })
}

/// Minimizes `negloglik + rho * ||coef||_1`. Gaussian problems use cyclic
/// coordinate descent on the Gram matrix; Bernoulli problems use monotone
/// accelerated proximal gradient with step-halving backtracking.
pub fn fit_glm_lasso(problem: &GlmProblem, rho: f64) -> Result<GlmFit> {
    fit_glm_lasso_from(problem, rho, None)
}

pub fn fit_glm_lasso_from(problem: &GlmProblem, rho: f64, start: Option<&[f64]>) -> Result<GlmFit> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("penalty must be finite and >= 0, got {rho}")));
    }
    if rho == 0.0 || problem.q() == 0 {
        return fit_glm_from(problem, start);
    }
    let q = problem.q();
    let smooth = Smooth::new(problem);
    if let Smooth::Quadratic { gram, zty, yty } = &smooth {
        return Ok(lasso_cd(gram, zty, *yty, rho, start));
    }
    let penalized = |c: &DVector<f64>, f: f64| f + rho * c.iter().map(|v| v.abs()).sum::<f64>();

    let mut x = match start {
        Some(s) if s.len() == q => DVector::from_column_slice(s),
        _ => DVector::zeros(q),
    };
    let mut obj = penalized(&x, smooth.value(&x));
    let mut trace = vec![obj];
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut lip = smooth.lipschitz_guess();

    for iter in 0..LASSO_MAX_ITERS {
        if iter % 5 == 0 && kkt_ok(&x, &smooth.gradient(&x), rho, LASSO_KKT_TOL) {
            return Ok(GlmFit {
                coef: x.as_slice().to_vec(),
                ridged: false,
                iterations: iter,
                converged: true,
                trace,
            });
        }
        let fy = smooth.value(&y);
        let gy = smooth.gradient(&y);
        let mut z;
        let mut fz;
        let mut halvings = 0;
        loop {
            let step = 1.0 / lip;
            z = (&y - &gy * step).map(|v| shrink(v, rho * step));
            fz = smooth.value(&z);
            let d = &z - &y;
            if fz <= fy + gy.dot(&d) + 0.5 * lip * d.norm_squared() + 1e-12 * fy.abs() {
                break;
            }
            lip *= 2.0;
            halvings += 1;
            if halvings > 60 {
                return Err(Error::Convergence("lasso line search failed".into()));
            }
        }
        let fz_obj = penalized(&z, fz);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let x_prev = x.clone();
        if fz_obj <= obj {
            x = z.clone();
            obj = fz_obj;
        }
        y = &x + (&z - &x) * (t / t_next) + (&x - &x_prev) * ((t - 1.0) / t_next);
        t = t_next;
        trace.push(obj);
        // allow the step to grow back slowly
        lip *= 0.95;
    }
    let converged = kkt_ok(&x, &smooth.gradient(&x), rho, LASSO_KKT_TOL * 10.0);
    Ok(GlmFit {
        coef: x.as_slice().to_vec(),
        ridged: false,
        iterations: LASSO_MAX_ITERS,
        converged,
        trace,
    })
}

// Cyclic coordinate descent on 0.5 c'Gc - b'c + rho |c|_1, keeping the
// gradient Gc - b up to date. Each coordinate step is exact, so the
// objective never increases.
fn lasso_cd(gram: &DMatrix<f64>, b: &DVector<f64>, yty: f64, rho: f64, start: Option<&[f64]>) -> GlmFit {
    let q = b.len();
    let mut c = match start {
        Some(s) if s.len() == q => DVector::from_column_slice(s),
        _ => DVector::zeros(q),
    };
    let mut grad = gram * &c - b;
    let value = |c: &DVector<f64>, grad: &DVector<f64>| {
        // 0.5 c'Gc - b'c = 0.5 c'(grad - b)
        (0.5 * c.dot(&(grad - b)) + 0.5 * yty).max(0.0) + rho * c.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut trace = vec![value(&c, &grad)];
    for sweep in 0..LASSO_MAX_ITERS {
        if kkt_ok(&c, &grad, rho, LASSO_KKT_TOL) {
            return GlmFit { coef: c.as_slice().to_vec(), ridged: false, iterations: sweep, converged: true, trace };
        }
        for j in 0..q {
            let gjj = gram[(j, j)];
            let new = if gjj > 0.0 { shrink(gjj * c[j] - grad[j], rho) / gjj } else { 0.0 };
            let delta = new - c[j];
            if delta != 0.0 {
                c[j] = new;
                grad.axpy(delta, &gram.column(j), 1.0);
            }
        }
        trace.push(value(&c, &grad));
    }
    let converged = kkt_ok(&c, &grad, rho, LASSO_KKT_TOL * 10.0);
    GlmFit { coef: c.as_slice().to_vec(), ridged: false, iterations: LASSO_MAX_ITERS, converged, trace }
}

/// Lasso optimality conditions at `coef` given the smooth-loss gradient.
pub fn kkt_ok(coef: &DVector<f64>, grad: &DVector<f64>, rho: f64, tol: f64) -> bool {
    let scale = rho.max(1.0);
    coef.iter().zip(grad.iter()).all(|(&c, &g)| {
        if c != 0.0 {
            (g + rho * c.signum()).abs() <= tol * scale
        } else {
            g.abs() <= rho + tol * scale
        }
    })
}

// Smooth part of the lasso objective; the Gaussian case works from the Gram matrix.
enum Smooth<'a> {
    Quadratic {
        gram: DMatrix<f64>,
        zty: DVector<f64>,
        yty: f64,
    },
    General(&'a GlmProblem),
}

impl<'a> Smooth<'a> {
    fn new(problem: &'a GlmProblem) -> Self {
        match problem.family {
            Family::Gaussian => {
                let r = DVector::from_iterator(
                    problem.n(),
                    problem.y.iter().zip(&problem.offset).map(|(y, o)| y - o),
                );
                Smooth::Quadratic {
                    gram: problem.z.transpose() * &problem.z,
                    zty: problem.z.transpose() * &r,
                    yty: r.norm_squared(),
                }
            }
            Family::Bernoulli => Smooth::General(problem),
        }
    }

    fn value(&self, c: &DVector<f64>) -> f64 {
        match self {
            Smooth::Quadratic { gram, zty, yty } => {
                (0.5 * c.dot(&(gram * c)) - zty.dot(c) + 0.5 * yty).max(0.0)
            }
            Smooth::General(p) => p.loss(c.as_slice()),
        }
    }

    fn gradient(&self, c: &DVector<f64>) -> DVector<f64> {
        match self {
            Smooth::Quadratic { gram, zty, .. } => gram * c - zty,
            Smooth::General(p) => DVector::from_vec(p.gradient(c.as_slice())),
        }
    }

    fn lipschitz_guess(&self) -> f64 {
        let gram = match self {
            Smooth::Quadratic { gram, .. } => gram.clone(),
            Smooth::General(p) => (p.z.transpose() * &p.z) * 0.25,
        };
        gram.symmetric_eigenvalues().amax().max(1e-12)
    }
}

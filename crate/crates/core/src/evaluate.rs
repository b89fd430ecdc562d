//! Error metrics, k-fold cross-validation over (rho, rank) grids and
//! replicated simulation experiments.
//!
//! Grid points, folds and replications are independent jobs. When the
//! `parallel` feature is on and `SYMREG_THREADS` is above one they run on a
//! private thread pool; results are always gathered in job order, so the
//! output does not depend on scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::simulate::{simulate, simulate_stream, SimSpec, TEST_STREAM};
use crate::solvers::{fit, symmetrized, Dataset, Estimator, FitConfig, FitResult};

/// Environment variable capping worker threads (0 or unset: sequential).
pub const THREADS_ENV: &str = "SYMREG_THREADS";

pub fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let threads = configured_threads();
        if threads > 1 && items.len() > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(|| items.par_iter().map(&f).collect());
            }
        }
    }
    items.iter().map(f).collect()
}

/// Mean squared error per entry, `||b_hat - b0||_F^2 / p^2`.
pub fn mse_coef(b_hat: &nalgebra::DMatrix<f64>, b0: &nalgebra::DMatrix<f64>) -> Result<f64> {
    if b_hat.shape() != b0.shape() {
        return Err(dim_err("mse_coef", format!("{:?} vs {:?}", b_hat.shape(), b0.shape())));
    }
    Ok((b_hat - b0).norm_squared() / b0.len() as f64)
}

pub fn mse_pred(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(dim_err("mse_pred", format!("{} predictions for {} responses", y_hat.len(), y.len())));
    }
    Ok(y_hat.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub k: usize,
    /// Class label per sample; each class is split across folds separately.
    pub strata: Option<Vec<i64>>,
    pub rho_grid: Vec<f64>,
    pub rank_grid: Vec<usize>,
    pub seed: u64,
}

impl CvPlan {
    pub fn new(rho_grid: Vec<f64>, rank_grid: Vec<usize>, seed: u64) -> Self {
        Self {
            k: 3,
            strata: None,
            rho_grid,
            rank_grid,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument("k must be at least 2".into()));
        }
        if self.rho_grid.is_empty() || self.rank_grid.is_empty() {
            return Err(Error::InvalidArgument("rho and rank grids must be non-empty".into()));
        }
        if self.rho_grid.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument("rho grid values must be finite and >= 0".into()));
        }
        if self.rank_grid.contains(&0) {
            return Err(Error::InvalidArgument("ranks must be positive".into()));
        }
        Ok(())
    }
}

/// Splits `0..n` into `plan.k` disjoint sorted folds.
///
/// Indices are shuffled with the plan seed and dealt round-robin. With strata
/// each class (in ascending label order) is shuffled and dealt on its own,
/// continuing the rotation where the previous class stopped, so class counts
/// per fold differ by at most one and overall fold sizes stay balanced. A
/// class smaller than `k` simply leaves some folds without members.
pub fn kfold_split(n: usize, plan: &CvPlan) -> Result<Vec<Vec<usize>>> {
    if plan.k < 2 {
        return Err(Error::InvalidArgument("k must be at least 2".into()));
    }
    if n < plan.k {
        return Err(Error::InvalidArgument(format!("cannot split {n} samples into {} folds", plan.k)));
    }
    let classes: Vec<Vec<usize>> = match &plan.strata {
        None => vec![(0..n).collect()],
        Some(labels) => {
            if labels.len() != n {
                return Err(dim_err("kfold_split", format!("{} labels for {n} samples", labels.len())));
            }
            let mut keys: Vec<i64> = labels.clone();
            keys.sort_unstable();
            keys.dedup();
            keys.iter()
                .map(|k| (0..n).filter(|&i| labels[i] == *k).collect())
                .collect()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut folds = vec![Vec::new(); plan.k];
    let mut next = 0;
    for mut members in classes {
        members.shuffle(&mut rng);
        for i in members {
            folds[next % plan.k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Held-out results for one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub rho: f64,
    pub rank: usize,
    /// Held-out MSE per fold (NaN where the fit failed).
    pub fold_mse: Vec<f64>,
    /// Mean over folds; `None` when any fold failed.
    pub mean_mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub estimator: Estimator,
    pub rho: f64,
    pub rank: usize,
    pub folds: Vec<Vec<usize>>,
    pub points: Vec<CvPoint>,
}

impl CvResult {
    pub fn selected_point(&self) -> &CvPoint {
        self.points
            .iter()
            .find(|p| p.rho == self.rho && p.rank == self.rank)
            .expect("selection comes from the grid")
    }
}

/// Cross-validated choice of `(rho, rank)` by mean held-out prediction MSE.
///
/// Ties go to the larger rho, then the smaller rank. Grid points whose fits
/// fail on any fold are kept in the table with their error and excluded from
/// the selection; it is an error only if every point fails.
pub fn cv_select(data: &Dataset, plan: &CvPlan, config: &FitConfig, estimator: Estimator) -> Result<CvResult> {
    plan.validate()?;
    config.validate()?;
    let folds = kfold_split(data.n(), plan)?;
    let grid: Vec<(f64, usize)> = plan
        .rho_grid
        .iter()
        .flat_map(|&rho| plan.rank_grid.iter().map(move |&rank| (rho, rank)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..folds.len()).map(move |f| (g, f))).collect();

    let outcomes = par_map(&jobs, |&(g, f)| -> Result<f64> {
        let (rho, rank) = grid[g];
        let train: Vec<usize> = (0..folds.len())
            .filter(|&j| j != f)
            .flat_map(|j| folds[j].iter().copied())
            .collect();
        let mut train_idx = train;
        train_idx.sort_unstable();
        let cfg = FitConfig { rho, rank, ..config.clone() };
        let model = fit(&data.subset(&train_idx), &cfg, estimator)?;
        let test = data.subset(&folds[f]);
        mse_pred(&model.predict(&test), test.y())
    });

    let k = folds.len();
    let mut points = Vec::with_capacity(grid.len());
    for (g, &(rho, rank)) in grid.iter().enumerate() {
        let mut fold_mse = Vec::with_capacity(k);
        let mut error = None;
        for out in &outcomes[g * k..(g + 1) * k] {
            match out {
                Ok(v) => fold_mse.push(*v),
                Err(e) => {
                    fold_mse.push(f64::NAN);
                    error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        let mean_mse = error.is_none().then(|| fold_mse.iter().sum::<f64>() / k as f64);
        points.push(CvPoint { rho, rank, fold_mse, mean_mse, error });
    }

    let best = points
        .iter()
        .filter_map(|p| p.mean_mse.map(|m| (m, p)))
        .min_by(|(ma, a), (mb, b)| {
            ma.total_cmp(mb)
                .then(b.rho.total_cmp(&a.rho))
                .then(a.rank.cmp(&b.rank))
        })
        .map(|(_, p)| (p.rho, p.rank))
        .ok_or_else(|| Error::Convergence("every grid point failed during cross-validation".into()))?;

    Ok(CvResult {
        estimator,
        rho: best.0,
        rank: best.1,
        folds,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub sim: SimSpec,
    pub estimators: Vec<Estimator>,
    pub replications: usize,
    pub config: FitConfig,
}

/// One estimator in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub estimator: Estimator,
    pub mse_coef: f64,
    /// Prediction MSE on an independent test set of the same size.
    pub mse_pred: f64,
    /// Prediction MSE on the training data.
    pub mse_pred_train: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub shape: String,
    pub p: usize,
    pub n: usize,
    pub estimator: Estimator,
    pub replications: usize,
    pub failures: usize,
    pub mse_coef_mean: f64,
    pub mse_coef_sd: f64,
    pub mse_pred_mean: f64,
    pub mse_pred_sd: f64,
    pub mse_pred_train_mean: f64,
    pub mse_pred_train_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<SummaryRow>,
    pub records: Vec<ReplicationRecord>,
}

impl ExperimentResult {
    pub fn row(&self, estimator: Estimator) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }
}

/// Replication `r` uses seed `spec.sim.seed ^ r` for its training data, the
/// same seed on a separate stream for its test data, and the same seed for
/// the CP starting values.
pub fn replication_seed(base: u64, r: usize) -> u64 {
    base ^ r as u64
}

fn run_replication(spec: &ExperimentSpec, r: usize) -> Vec<ReplicationRecord> {
    let seed = replication_seed(spec.sim.seed, r);
    let sim_spec = SimSpec { seed, ..spec.sim.clone() };
    let config = FitConfig { seed, ..spec.config.clone() };
    let failed = |est: Estimator, msg: String| ReplicationRecord {
        replication: r,
        seed,
        estimator: est,
        mse_coef: f64::NAN,
        mse_pred: f64::NAN,
        mse_pred_train: f64::NAN,
        iterations: 0,
        converged: false,
        error: Some(msg),
    };

    let fits: Result<(crate::simulate::Simulation, Dataset, Vec<FitResult>)> = (|| {
        let train = simulate(&sim_spec)?;
        let test = simulate_stream(&sim_spec, TEST_STREAM)?.data;
        // one CP fit serves every estimator in this replication
        let fits = if spec.estimators.contains(&Estimator::SymTensor) {
            let mut st = fit(&train.data, &config, Estimator::SymTensor)?;
            let mut all = std::mem::take(&mut st.baselines);
            all.push(st);
            all
        } else {
            let cp = fit(&train.data, &config, Estimator::Cp)?;
            let sym = symmetrized(&cp);
            vec![cp, sym]
        };
        Ok((train, test, fits))
    })();

    match fits {
        Err(e) => spec.estimators.iter().map(|&est| failed(est, e.to_string())).collect(),
        Ok((train, test, fits)) => spec
            .estimators
            .iter()
            .map(|&est| {
                let f = fits.iter().find(|f| f.estimator == est).expect("all estimators fitted");
                let scores = (|| -> Result<(f64, f64, f64)> {
                    Ok((
                        mse_coef(f.coef_full.as_matrix(), train.b0.as_matrix())?,
                        mse_pred(&f.predict(&test), test.y())?,
                        mse_pred(&f.predict(&train.data), train.data.y())?,
                    ))
                })();
                match scores {
                    Ok((c, pt, pi)) => ReplicationRecord {
                        replication: r,
                        seed,
                        estimator: est,
                        mse_coef: c,
                        mse_pred: pt,
                        mse_pred_train: pi,
                        iterations: f.iterations,
                        converged: f.converged,
                        error: None,
                    },
                    Err(e) => failed(est, e.to_string()),
                }
            })
            .collect(),
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// Mean and standard deviation of coefficient and prediction error per
/// estimator over independent replications. Failed replications are
/// excluded from the averages and counted.
pub fn replicate_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.replications == 0 {
        return Err(Error::InvalidArgument("replications must be at least 1".into()));
    }
    if spec.estimators.is_empty() {
        return Err(Error::InvalidArgument("no estimators requested".into()));
    }
    spec.sim.validate()?;
    spec.config.validate()?;
    let reps: Vec<usize> = (0..spec.replications).collect();
    let records: Vec<ReplicationRecord> = par_map(&reps, |&r| run_replication(spec, r)).into_iter().flatten().collect();

    let rows = spec
        .estimators
        .iter()
        .map(|&est| {
            let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.estimator == est && r.error.is_none()).collect();
            let pick = |f: fn(&ReplicationRecord) -> f64| mean_sd(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (cm, cs) = pick(|r| r.mse_coef);
            let (pm, ps) = pick(|r| r.mse_pred);
            let (tm, ts) = pick(|r| r.mse_pred_train);
            SummaryRow {
                shape: spec.sim.shape.name().to_string(),
                p: spec.sim.p,
                n: spec.sim.n,
                estimator: est,
                replications: ok.len(),
                failures: spec.replications - ok.len(),
                mse_coef_mean: cm,
                mse_coef_sd: cs,
                mse_pred_mean: pm,
                mse_pred_sd: ps,
                mse_pred_train_mean: tm,
                mse_pred_train_sd: ts,
            }
        })
        .collect();
    Ok(ExperimentResult { rows, records })
}

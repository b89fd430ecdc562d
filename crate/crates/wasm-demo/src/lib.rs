//! Browser bindings for a few `symreg` operations.
//!
//! The work happens in plain functions returning `Result<_, String>` so they
//! can be tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use symreg::evaluate::{mse_coef, mse_pred};
use symreg::simulate::{shape_signal, simulate, simulate_stream, simulate_with_signal, SignalShape, SimSpec, TEST_STREAM};
use symreg::solvers::{construct_init, default_pipeline, fit_sym_tensor, Estimator, Factors};
use symreg::{DenseMatrix, FitConfig, FitResult, SymmetricMatrix};
use wasm_bindgen::prelude::*;

/// Keeps browser fits short.
pub const MAX_P: usize = 48;
pub const MAX_N: usize = 1000;

fn parse_shape(name: &str) -> Result<SignalShape, String> {
    SignalShape::parse(name).ok_or_else(|| format!("unknown shape '{name}'"))
}

// symmetric, so row- and column-major order agree
fn flat(m: &SymmetricMatrix) -> Vec<f64> {
    m.as_matrix().as_slice().to_vec()
}

/// Row-major `p x p` signal for `shape`.
pub fn shape_values(shape: &str, p: usize) -> Result<Vec<f64>, String> {
    let s = shape_signal(parse_shape(shape)?, p).map_err(|e| e.to_string())?;
    Ok(flat(&s))
}

#[wasm_bindgen]
pub fn shape_heatmap(shape: &str, p: usize) -> Result<Vec<f64>, JsError> {
    shape_values(shape, p).map_err(|e| JsError::new(&e))
}

/// Truth and the three estimates from one simulated dataset.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Comparison {
    p: usize,
    truth: Vec<f64>,
    coefs: [Vec<f64>; 3],
    mse_coef: [f64; 3],
    mse_pred: [f64; 3],
    iterations: usize,
}

const ORDER: [Estimator; 3] = [Estimator::Cp, Estimator::SymCp, Estimator::SymTensor];

fn slot(name: &str) -> Result<usize, JsError> {
    Estimator::parse(name)
        .and_then(|e| ORDER.iter().position(|o| *o == e))
        .ok_or_else(|| JsError::new(&format!("unknown estimator '{name}'")))
}

impl Comparison {
    pub fn coef_of(&self, e: Estimator) -> &[f64] {
        &self.coefs[ORDER.iter().position(|o| *o == e).unwrap()]
    }

    pub fn mse_coef_of(&self, e: Estimator) -> f64 {
        self.mse_coef[ORDER.iter().position(|o| *o == e).unwrap()]
    }

    pub fn mse_pred_of(&self, e: Estimator) -> f64 {
        self.mse_pred[ORDER.iter().position(|o| *o == e).unwrap()]
    }
}

#[wasm_bindgen]
impl Comparison {
    #[wasm_bindgen(getter)]
    pub fn p(&self) -> usize {
        self.p
    }

    #[wasm_bindgen(getter)]
    pub fn truth(&self) -> Vec<f64> {
        self.truth.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Symmetric part of the estimate for `cp`, `sym_cp` or `sym_tensor`.
    pub fn coef(&self, estimator: &str) -> Result<Vec<f64>, JsError> {
        Ok(self.coefs[slot(estimator)?].clone())
    }

    pub fn coef_error(&self, estimator: &str) -> Result<f64, JsError> {
        Ok(self.mse_coef[slot(estimator)?])
    }

    /// Prediction MSE on an independent test sample of the same size.
    pub fn pred_error(&self, estimator: &str) -> Result<f64, JsError> {
        Ok(self.mse_pred[slot(estimator)?])
    }
}

/// Simulates from `shape` and fits all three estimators at one `(rank, rho)`.
pub fn run_comparison(shape: &str, p: usize, n: usize, seed: u64, rank: usize, rho: f64) -> Result<Comparison, String> {
    if p > MAX_P || n > MAX_N {
        return Err(format!("demo limits are p <= {MAX_P} and n <= {MAX_N}"));
    }
    let spec = SimSpec::new(parse_shape(shape)?, p, n, seed);
    let err = |e: symreg::Error| e.to_string();
    let train = simulate(&spec).map_err(err)?;
    let test = simulate_stream(&spec, TEST_STREAM).map_err(err)?;
    let config = FitConfig { rank, rho, seed, ..FitConfig::default() };
    let st = default_pipeline(&train.data, &config).map_err(err)?;

    let fits: Vec<&FitResult> = ORDER
        .iter()
        .map(|&e| if e == Estimator::SymTensor { Some(&st) } else { st.baseline(e) })
        .collect::<Option<_>>()
        .ok_or("pipeline did not report its baselines")?;
    let b0 = train.b0.as_matrix();
    let mut out = Comparison {
        p,
        truth: flat(&train.b0),
        coefs: Default::default(),
        mse_coef: [0.0; 3],
        mse_pred: [0.0; 3],
        iterations: st.iterations,
    };
    for (k, fit) in fits.iter().enumerate() {
        // the heatmap shows the symmetric part; the error uses the raw CP product
        out.coefs[k] = flat(&fit.coef_full.symmetric());
        out.mse_coef[k] = mse_coef(fit.coef_full.as_matrix(), b0).map_err(err)?;
        out.mse_pred[k] = mse_pred(&fit.predict(&test.data), test.data.y()).map_err(err)?;
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn compare_estimators(shape: &str, p: usize, n: usize, seed: u64, rank: usize, rho: f64) -> Result<Comparison, JsError> {
    run_comparison(shape, p, n, seed, rank, rho).map_err(|e| JsError::new(&e))
}

/// Eigen initializer on a 2x2 matrix, plus fits from a poor and from the
/// constructed start on data simulated with that matrix as the signal.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct InitDemo {
    lambda: Vec<f64>,
    columns: Vec<f64>,
    bad_lambda: Vec<f64>,
    bad_coef: Vec<f64>,
    good_coef: Vec<f64>,
}

#[wasm_bindgen]
impl InitDemo {
    #[wasm_bindgen(getter)]
    pub fn lambda(&self) -> Vec<f64> {
        self.lambda.clone()
    }

    /// Factor columns, one after the other.
    #[wasm_bindgen(getter)]
    pub fn columns(&self) -> Vec<f64> {
        self.columns.clone()
    }

    /// Weights reached from the start whose second column is zero.
    #[wasm_bindgen(getter)]
    pub fn bad_lambda(&self) -> Vec<f64> {
        self.bad_lambda.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn bad_coef(&self) -> Vec<f64> {
        self.bad_coef.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn good_coef(&self) -> Vec<f64> {
        self.good_coef.clone()
    }
}

pub fn run_init_demo(a: f64, b: f64, c: f64, seed: u64, rho: f64) -> Result<InitDemo, String> {
    let err = |e: symreg::Error| e.to_string();
    let truth = SymmetricMatrix::from_rows(2, &[a, b, b, c]).map_err(err)?;
    let init = construct_init(&truth, 2).map_err(err)?;

    // noise variance 0.2, roughly 10:1 signal to noise for a unit off-diagonal
    let sim = simulate_with_signal(&truth, 1000, &[], 0.2f64.sqrt(), seed, 0).map_err(err)?;
    let config = FitConfig { rank: 2, rho, seed, ..FitConfig::default() };
    let poor = DenseMatrix::from_rows(2, 2, &[1.0, 0.0, 0.0, 0.0]).map_err(err)?;
    let bad = fit_sym_tensor(&sim.data, &config, poor).map_err(err)?;
    let good = default_pipeline(&sim.data, &config).map_err(err)?;
    let bad_lambda = match &bad.factors {
        Factors::Sym(f) => f.lambda.clone(),
        Factors::Cp(_) => return Err("unexpected CP factors".into()),
    };
    Ok(InitDemo {
        lambda: init.lambda.clone(),
        columns: init.b.as_matrix().as_slice().to_vec(),
        bad_lambda,
        bad_coef: flat(&bad.coef_full.symmetric()),
        good_coef: flat(&good.coef_full.symmetric()),
    })
}

#[wasm_bindgen]
pub fn initializer_demo(a: f64, b: f64, c: f64, seed: u64, rho: f64) -> Result<InitDemo, JsError> {
    run_init_demo(a, b, c, seed, rho).map_err(|e| JsError::new(&e))
}

impl InitDemo {
    pub fn weights(&self) -> &[f64] {
        &self.lambda
    }

    pub fn stuck_weights(&self) -> &[f64] {
        &self.bad_lambda
    }

    pub fn constructed_fit(&self) -> &[f64] {
        &self.good_coef
    }
}

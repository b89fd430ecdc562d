//! Seeded synthetic data: 0/1 signal shapes, random correlation matrices and
//! Gaussian responses.
//!
//! All randomness comes from [`ChaCha8Rng`] seeded with `seed_from_u64`;
//! normals are drawn with `rand_distr::StandardNormal` (ziggurat). Per sample
//! the draw order is `X_i` (p*p normals), `z_i` (p0 normals), then the noise.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::Family;
use crate::solvers::Dataset;
use crate::tensor::{frob, SymmetricMatrix};

/// Name recorded in run manifests.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng(seed_from_u64)+StandardNormal(ziggurat)";

/// ChaCha stream used for held-out test sets drawn alongside a training set.
pub const TEST_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalShape {
    Circle,
    Cross,
    Butterfly,
    TwoBox,
    ThreeBox,
}

impl SignalShape {
    pub const ALL: [SignalShape; 5] = [
        SignalShape::Circle,
        SignalShape::Cross,
        SignalShape::Butterfly,
        SignalShape::TwoBox,
        SignalShape::ThreeBox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SignalShape::Circle => "circle",
            SignalShape::Cross => "cross",
            SignalShape::Butterfly => "butterfly",
            SignalShape::TwoBox => "two_box",
            SignalShape::ThreeBox => "three_box",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl std::fmt::Display for SignalShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The 0/1 signal matrix for `shape` at side length `p` (p >= 16, p % 8 == 0).
pub fn shape_signal(shape: SignalShape, p: usize) -> Result<SymmetricMatrix> {
    if p < 16 || p % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "shape side length must be >= 16 and divisible by 8, got {p}"
        )));
    }
    let pf = p as f64;
    let c = (pf + 1.0) / 2.0;
    let in_block = |i: usize, j: usize, lo: usize, hi: usize| (lo..=hi).contains(&i) && (lo..=hi).contains(&j);
    let third = p / 6;
    let starts = [p / 12 + 1, 5 * p / 12 + 1, 9 * p / 12 + 1];

    // 1-based indices throughout
    let on = |i: usize, j: usize| -> bool {
        let (fi, fj) = (i as f64, j as f64);
        match shape {
            SignalShape::Circle => {
                let d = ((fi - c).powi(2) + (fj - c).powi(2)).sqrt();
                pf / 4.0 - pf / 16.0 <= d && d <= pf / 4.0 + pf / 16.0
            }
            SignalShape::Cross => (fi - c).abs() <= pf / 16.0 || (fj - c).abs() <= pf / 16.0,
            SignalShape::Butterfly => {
                (fi - fj).abs() <= (fi + fj - (pf + 1.0)).abs() / 2.0
                    && (fi - c).abs().max((fj - c).abs()) <= 3.0 * pf / 8.0
            }
            SignalShape::TwoBox => {
                in_block(i, j, p / 8 + 1, 3 * p / 8) || in_block(i, j, 5 * p / 8 + 1, 7 * p / 8)
            }
            SignalShape::ThreeBox => starts.iter().any(|&s| in_block(i, j, s, s + third - 1)),
        }
    };
    let m = DMatrix::from_fn(p, p, |r, col| if on(r + 1, col + 1) { 1.0 } else { 0.0 });
    SymmetricMatrix::new(m)
}

/// `D^{-1/2} A A^T D^{-1/2}` for `A` with i.i.d. standard normal entries.
/// The diagonal is exactly one and the result is exactly symmetric.
pub fn random_correlation<R: Rng + ?Sized>(p: usize, rng: &mut R) -> SymmetricMatrix {
    loop {
        let a: DMatrix<f64> = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut *rng));
        let s = &a * a.transpose();
        let d: Vec<f64> = (0..p).map(|i| s[(i, i)]).collect();
        if d.iter().any(|v| !(*v > 0.0)) {
            continue;
        }
        let mut x = DMatrix::identity(p, p);
        for j in 0..p {
            for i in (j + 1)..p {
                let v = (s[(i, j)] / (d[i] * d[j]).sqrt()).clamp(-1.0, 1.0);
                x[(i, j)] = v;
                x[(j, i)] = v;
            }
        }
        return SymmetricMatrix::from_raw(x);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub shape: SignalShape,
    pub p: usize,
    pub n: usize,
    pub p0: usize,
    pub gamma0: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl SimSpec {
    /// Defaults: five covariates with unit coefficients and unit noise.
    pub fn new(shape: SignalShape, p: usize, n: usize, seed: u64) -> Self {
        Self {
            shape,
            p,
            n,
            p0: 5,
            gamma0: vec![1.0; 5],
            sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument("sigma must be finite and non-negative".into()));
        }
        if self.gamma0.len() != self.p0 {
            return Err(Error::InvalidArgument(format!(
                "gamma0 has {} entries, p0 is {}",
                self.gamma0.len(),
                self.p0
            )));
        }
        Ok(())
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: Dataset,
    pub b0: SymmetricMatrix,
    pub gamma0: Vec<f64>,
    pub sigma: f64,
    /// Sample variance of the noiseless mean across the generated samples.
    pub signal_variance: f64,
}

impl Simulation {
    pub fn snr(&self) -> f64 {
        self.signal_variance / (self.sigma * self.sigma)
    }
}

/// Dataset for `spec`, drawn from stream 0 of the seeded generator.
pub fn gen_dataset(spec: &SimSpec) -> Result<Dataset> {
    simulate(spec).map(|s| s.data)
}

pub fn simulate(spec: &SimSpec) -> Result<Simulation> {
    simulate_stream(spec, 0)
}

/// Like [`simulate`], with `spec.n` samples from an independent ChaCha stream.
/// Stream [`TEST_STREAM`] gives held-out data for a training set.
pub fn simulate_stream(spec: &SimSpec, stream: u64) -> Result<Simulation> {
    spec.validate()?;
    let b0 = shape_signal(spec.shape, spec.p)?;
    simulate_with_signal(&b0, spec.n, &spec.gamma0, spec.sigma, spec.seed, stream)
}

/// Gaussian responses `y_i = gamma0^T z_i + <b0, X_i> + sigma * e_i` for an
/// arbitrary symmetric signal (for example a small hand-written matrix).
pub fn simulate_with_signal(
    b0: &SymmetricMatrix,
    n: usize,
    gamma0: &[f64],
    sigma: f64,
    seed: u64,
    stream: u64,
) -> Result<Simulation> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument("sigma must be finite and non-negative".into()));
    }
    let (p, p0) = (b0.p(), gamma0.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);

    let mut xs = Vec::with_capacity(n);
    let mut z = DMatrix::zeros(n, p0);
    let mut y = Vec::with_capacity(n);
    let mut mean = Vec::with_capacity(n);
    for i in 0..n {
        let x = random_correlation(p, &mut rng);
        for k in 0..p0 {
            z[(i, k)] = StandardNormal.sample(&mut rng);
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        let mu = (0..p0).map(|k| gamma0[k] * z[(i, k)]).sum::<f64>() + frob(&x, b0);
        mean.push(mu);
        y.push(mu + sigma * e);
        xs.push(x);
    }
    let avg = mean.iter().sum::<f64>() / n as f64;
    let signal_variance = if n > 1 {
        mean.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(Simulation {
        data: Dataset::new(y, z, xs, Family::Gaussian)?,
        b0: b0.clone(),
        gamma0: gamma0.to_vec(),
        sigma,
        signal_variance,
    })
}

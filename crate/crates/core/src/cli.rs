//! The `symreg` command line.
//!
//! Exit codes: 0 success, 1 solver failure, 2 usage or validation error,
//! 3 I/O error, 4 results written but the fit hit its iteration limit.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::error::{Error, Result};
use crate::evaluate::{cv_select, replicate_experiment, CvPlan, ExperimentSpec};
use crate::glm::Family;
use crate::io::{self, fmt_f64, DatasetMeta, ReadOptions, RunManifest};
use crate::simulate::{self, SignalShape, SimSpec, RNG_ALGORITHM};
use crate::solvers::{self, Estimator, FitConfig, FitResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "symreg", version, about = "Sparse symmetric low-rank regression on matrix covariates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Simulate(SimulateArgs),
    /// Fit one estimator to a dataset directory.
    Fit(FitArgs),
    /// Choose rho and rank by k-fold cross-validation.
    Cv(CvArgs),
    /// Replicated simulation study (mean and sd of coefficient and prediction error).
    Replicate(ReplicateArgs),
    /// Re-run the command recorded in a manifest into a new output directory.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    shape: String,
    #[arg(long, default_value_t = 32)]
    p: usize,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    p0: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 3)]
    rank: usize,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 5)]
    prox_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    delta0: f64,
    #[arg(long, default_value_t = 50)]
    max_halvings: usize,
    /// Seed for random starting values.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rescale factor columns to unit norm after each update.
    #[arg(long)]
    renormalize: bool,
}

impl SolverArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            rank: self.rank,
            rho: self.rho,
            max_outer_iters: self.max_iter,
            tol: self.tol,
            prox_steps: self.prox_steps,
            delta0: self.delta0,
            line_search_max_halvings: self.max_halvings,
            seed: self.seed,
            renormalize_columns: self.renormalize,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Replace y by ln(y) on ingest.
    #[arg(long)]
    log_response: bool,
    /// Override the family recorded in meta.json.
    #[arg(long)]
    family: Option<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Cp,
    #[value(alias = "sym_cp")]
    SymCp,
    #[value(alias = "sym_tensor")]
    SymTensor,
    Pipeline,
}

impl EstimatorArg {
    fn estimator(self) -> Estimator {
        match self {
            EstimatorArg::Cp => Estimator::Cp,
            EstimatorArg::SymCp => Estimator::SymCp,
            EstimatorArg::SymTensor | EstimatorArg::Pipeline => Estimator::SymTensor,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum InitArg {
    /// Eigen-decomposition of the symmetrized CP fit.
    Constructed,
    /// Standard normal factor entries drawn from --seed.
    Random,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, value_enum, default_value = "pipeline")]
    estimator: EstimatorArg,
    /// Starting values for the symmetric tensor fit.
    #[arg(long, value_enum, default_value = "constructed")]
    init: InitArg,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, value_enum, default_value = "sym-tensor")]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Comma-separated penalties.
    #[arg(long, default_value = "0")]
    rho_grid: String,
    /// Comma-separated ranks.
    #[arg(long, default_value = "3")]
    rank_grid: String,
    /// Column of subjects.csv with integer class labels to stratify folds by.
    #[arg(long)]
    strata_column: Option<String>,
    /// Seed for the fold assignment.
    #[arg(long, default_value_t = 0)]
    fold_seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplicateArgs {
    /// Comma-separated shapes.
    #[arg(long, alias = "shapes", default_value = "two_box,cross,circle")]
    shape: String,
    #[arg(long, default_value_t = 32)]
    p: usize,
    /// Comma-separated sample sizes.
    #[arg(long, default_value = "500")]
    n_list: String,
    #[arg(long, default_value_t = 10)]
    replications: usize,
    /// Comma-separated subset of cp,sym_cp,sym_tensor.
    #[arg(long, default_value = "cp,sym_cp,sym_tensor")]
    estimators: String,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RerunArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Outcome of a command that ran to completion.
enum Done {
    Ok,
    NotConverged,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Convergence(_) | Error::NumericalFailure { .. } => EXIT_SOLVER,
        _ => EXIT_USAGE,
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, recorded) {
        Ok(Done::Ok) => EXIT_OK,
        Ok(Done::NotConverged) => {
            eprintln!("warning: iteration limit reached before convergence; results written");
            EXIT_NOT_CONVERGED
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, args: Vec<String>) -> Result<Done> {
    let start = Instant::now();
    let mut rec = Recorder { args, start };
    match cmd {
        Command::Simulate(a) => cmd_simulate(a, &mut rec),
        Command::Fit(a) => cmd_fit(a, &mut rec),
        Command::Cv(a) => cmd_cv(a, &mut rec),
        Command::Replicate(a) => cmd_replicate(a, &mut rec),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

struct Recorder {
    args: Vec<String>,
    start: Instant,
}

impl Recorder {
    fn write(&self, command: &str, config: serde_json::Value, inputs: Vec<PathBuf>, out: &Path, seed: u64) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            args: self.args.clone(),
            config,
            inputs,
            output_dir: out.to_path_buf(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            seed,
            duration_secs: self.start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        io::write_json(&out.join("manifest.json"), &manifest)
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| usage(format!("{flag}: cannot parse '{t}'"))))
        .collect()
}

fn parse_shape(s: &str) -> Result<SignalShape> {
    SignalShape::parse(s.trim()).ok_or_else(|| {
        let names: Vec<&str> = SignalShape::ALL.iter().map(|s| s.name()).collect();
        usage(format!("--shape: unknown shape '{s}' (expected one of {})", names.join(", ")))
    })
}

fn check_p(p: usize) -> Result<()> {
    if p < 16 || p % 8 != 0 {
        return Err(usage(format!("--p: side length must be >= 16 and divisible by 8, got {p}")));
    }
    Ok(())
}

fn load(input: &DataArgs, strata_column: Option<String>) -> Result<io::LoadedDataset> {
    let family = match &input.family {
        None => None,
        Some(f) => Some(Family::parse(f).ok_or_else(|| usage(format!("--family: unknown family '{f}'")))?),
    };
    let opts = ReadOptions {
        family,
        log_response: input.log_response,
        strata_column,
    };
    io::read_dataset(&input.data, &opts)
}

fn cmd_simulate(a: SimulateArgs, rec: &mut Recorder) -> Result<Done> {
    let shape = parse_shape(&a.shape)?;
    check_p(a.p)?;
    let spec = SimSpec {
        p0: a.p0,
        gamma0: vec![1.0; a.p0],
        sigma: a.sigma,
        ..SimSpec::new(shape, a.p, a.n, a.seed)
    };
    spec.validate().map_err(|e| usage(format!("--n/--sigma: {e}")))?;
    let sim = simulate::simulate(&spec)?;
    let mut extra = serde_json::Map::new();
    extra.insert("shape".into(), json!(shape.name()));
    extra.insert("sigma".into(), json!(a.sigma));
    extra.insert("gamma0".into(), json!(spec.gamma0));
    extra.insert("signal_variance".into(), json!(sim.signal_variance));
    io::write_dataset(&a.out, &sim.data, &DatasetMeta { extra, ..Default::default() })?;
    io::write_grid(&a.out.join("truth.csv"), sim.b0.as_matrix())?;
    rec.write("simulate", to_json(&spec), vec![], &a.out, a.seed)?;
    Ok(Done::Ok)
}

fn run_fit(data: &crate::solvers::Dataset, estimator: EstimatorArg, init: InitArg, config: &FitConfig) -> Result<FitResult> {
    match (estimator, init) {
        (EstimatorArg::SymTensor, InitArg::Random) => {
            let start = solvers::random_init(data.p(), config.rank, config.seed);
            solvers::fit_sym_tensor(data, config, start)
        }
        (EstimatorArg::SymTensor, InitArg::Constructed) => {
            let mut f = solvers::default_pipeline(data, config)?;
            f.baselines.clear();
            Ok(f)
        }
        (e, _) => solvers::fit(data, config, e.estimator()),
    }
}

fn cmd_fit(a: FitArgs, rec: &mut Recorder) -> Result<Done> {
    let config = a.solver.config();
    config.validate()?;
    let loaded = load(&a.input, None)?;
    let data = &loaded.data;
    let fit = run_fit(data, a.estimator, a.init, &config)?;
    io::write_fit(&a.out, &fit, data, loaded.warnings.clone())?;
    for b in &fit.baselines {
        io::write_fit(&a.out.join(b.estimator.name()), b, data, vec![])?;
    }
    let cfg = json!({
        "estimator": format!("{:?}", a.estimator).to_lowercase(),
        "init": format!("{:?}", a.init).to_lowercase(),
        "log_response": a.input.log_response,
        "fit": to_json(&config),
    });
    rec.write("fit", cfg, vec![a.input.data.clone()], &a.out, config.seed)?;
    Ok(if fit.converged { Done::Ok } else { Done::NotConverged })
}

fn cmd_cv(a: CvArgs, rec: &mut Recorder) -> Result<Done> {
    let config = a.solver.config();
    config.validate()?;
    let plan = CvPlan {
        k: a.k,
        strata: None,
        rho_grid: parse_list("--rho-grid", &a.rho_grid)?,
        rank_grid: parse_list("--rank-grid", &a.rank_grid)?,
        seed: a.fold_seed,
    };
    plan.validate()?;
    let loaded = load(&a.input, a.strata_column.clone())?;
    let plan = CvPlan { strata: loaded.strata.clone(), ..plan };
    let data = &loaded.data;
    let estimator = a.estimator.estimator();
    let cv = cv_select(data, &plan, &config, estimator)?;

    fs::create_dir_all(&a.out)?;
    let mut table = String::from("fold");
    for p in &cv.points {
        table.push_str(&format!(",rho={};rank={}", fmt_f64(p.rho), p.rank));
    }
    table.push('\n');
    for f in 0..plan.k {
        table.push_str(&(f + 1).to_string());
        for p in &cv.points {
            table.push(',');
            table.push_str(&fmt_f64(p.fold_mse[f]));
        }
        table.push('\n');
    }
    table.push_str("overall");
    for p in &cv.points {
        table.push(',');
        table.push_str(&fmt_f64(p.mean_mse.unwrap_or(f64::NAN)));
    }
    table.push('\n');
    fs::write(a.out.join("cv_table.csv"), table)?;

    let mut folds = String::from("id,fold\n");
    let mut assignment = vec![0; data.n()];
    for (f, idx) in cv.folds.iter().enumerate() {
        for &i in idx {
            assignment[i] = f + 1;
        }
    }
    for (id, f) in data.ids().iter().zip(&assignment) {
        folds.push_str(&format!("{id},{f}\n"));
    }
    fs::write(a.out.join("folds.csv"), folds)?;

    // refit on everything at the selected point
    let final_cfg = FitConfig { rho: cv.rho, rank: cv.rank, ..config.clone() };
    let final_fit = solvers::fit(data, &final_cfg, estimator)?;
    let metrics = io::write_fit(&a.out.join("final"), &final_fit, data, loaded.warnings.clone())?;
    let failed: Vec<_> = cv
        .points
        .iter()
        .filter_map(|p| p.error.as_ref().map(|e| json!({"rho": p.rho, "rank": p.rank, "error": e})))
        .collect();
    let selected = json!({
        "estimator": estimator.name(),
        "rho": cv.rho,
        "rank": cv.rank,
        "k": plan.k,
        "cv_mse": cv.selected_point().mean_mse,
        "final_in_sample_mse": metrics.in_sample_mse,
        "failed_points": failed,
    });
    io::write_json(&a.out.join("selected.json"), &selected)?;
    let cfg = json!({ "plan": to_json(&plan), "fit": to_json(&config), "estimator": estimator.name() });
    rec.write("cv", cfg, vec![a.input.data.clone()], &a.out, a.fold_seed)?;
    Ok(if final_fit.converged { Done::Ok } else { Done::NotConverged })
}

fn cmd_replicate(a: ReplicateArgs, rec: &mut Recorder) -> Result<Done> {
    let config = a.solver.config();
    config.validate()?;
    let shapes = a.shape.split(',').map(parse_shape).collect::<Result<Vec<_>>>()?;
    check_p(a.p)?;
    let ns: Vec<usize> = parse_list("--n-list", &a.n_list)?;
    let estimators = a
        .estimators
        .split(',')
        .map(|s| Estimator::parse(s.trim()).ok_or_else(|| usage(format!("--estimators: unknown estimator '{s}'"))))
        .collect::<Result<Vec<_>>>()?;
    if shapes.is_empty() || ns.is_empty() || estimators.is_empty() {
        return Err(usage("--shape, --n-list and --estimators must be non-empty"));
    }

    fs::create_dir_all(&a.out)?;
    let mut summary = String::from(
        "shape,p,n,estimator,replications,failures,mse_coef_mean,mse_coef_sd,mse_pred_mean,mse_pred_sd,mse_pred_train_mean,mse_pred_train_sd\n",
    );
    let mut reps = String::from("shape,p,n,replication,seed,estimator,mse_coef,mse_pred,mse_pred_train,iterations,converged,error\n");
    let mut specs = Vec::new();
    for &shape in &shapes {
        for &n in &ns {
            let spec = ExperimentSpec {
                sim: SimSpec { sigma: a.sigma, ..SimSpec::new(shape, a.p, n, a.solver.seed) },
                estimators: estimators.clone(),
                replications: a.replications,
                config: config.clone(),
            };
            let res = replicate_experiment(&spec)?;
            for r in &res.rows {
                let nums = [
                    r.mse_coef_mean,
                    r.mse_coef_sd,
                    r.mse_pred_mean,
                    r.mse_pred_sd,
                    r.mse_pred_train_mean,
                    r.mse_pred_train_sd,
                ];
                summary.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.shape,
                    r.p,
                    r.n,
                    r.estimator.name(),
                    r.replications,
                    r.failures,
                    nums.map(fmt_f64).join(",")
                ));
            }
            for r in &res.records {
                reps.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    shape.name(),
                    a.p,
                    n,
                    r.replication,
                    r.seed,
                    r.estimator.name(),
                    fmt_f64(r.mse_coef),
                    fmt_f64(r.mse_pred),
                    fmt_f64(r.mse_pred_train),
                    r.iterations,
                    r.converged,
                    r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
                ));
            }
            specs.push(spec);
        }
    }
    fs::write(a.out.join("summary.csv"), summary)?;
    fs::write(a.out.join("replications.csv"), reps)?;
    rec.write("replicate", to_json(&specs), vec![], &a.out, a.solver.seed)?;
    Ok(Done::Ok)
}

fn cmd_rerun(a: RerunArgs) -> Result<Done> {
    let manifest = io::read_manifest(&a.manifest)?;
    let mut args = vec!["symreg".to_string()];
    let mut it = manifest.args.iter();
    while let Some(arg) = it.next() {
        if arg == "--out" {
            it.next();
        } else if !arg.starts_with("--out=") {
            args.push(arg.clone());
        }
    }
    if args.get(1).map(String::as_str) == Some("rerun") {
        return Err(usage("manifest records a rerun; point at the original manifest"));
    }
    args.push("--out".into());
    args.push(a.out.to_string_lossy().into_owned());
    let cli = Cli::try_parse_from(&args).map_err(|e| usage(format!("manifest arguments no longer parse: {e}")))?;
    let recorded = args[1..].to_vec();
    dispatch(cli.command, recorded)
}

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use kqr::data::{
    dataset_to_csv, load_covariates_csv, load_csv, predictions_to_csv, simulate_friedman, simulate_heteroscedastic,
    simulate_yuan, write_atomic, CsvOptions, Dataset, ResponseColumn,
};
use kqr::eval::{cross_validate, cross_validate_nckqr};
use kqr::kernel::{build_kernel_matrix, median_heuristic_bandwidth};
use kqr::model_file::{load_model, save_model, Fit, SavedModel};
use kqr::nckqr::{solve_nckqr, NckqrProblem};
use kqr::oracle::{reference_smoothed_optimum, OracleObjective};
use kqr::solver::{log_lambda_grid, solve_kqr, solve_kqr_path, solve_kqr_path_dense, timed, SolverConfig};
use kqr::{KernelModel, KernelSpec, QuantileLevel};
use nalgebra::DMatrix;

use crate::{BenchArgs, CurvesArgs, CvArgs, DataArgs, Design, FitArgs, KernelArgs, KernelChoice, PredictArgs, SimulateArgs, SolverArgs};

pub enum Outcome {
    Certified,
    Uncertified(String),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(kqr::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<kqr::Error> for CliError {
    fn from(e: kqr::Error) -> Self {
        CliError::Lib(e)
    }
}

type CmdResult = Result<Outcome, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn csv_options(no_header: bool) -> CsvOptions {
    CsvOptions {
        has_header: if no_header { Some(false) } else { None },
    }
}

fn response_column(spec: &Option<String>) -> ResponseColumn {
    match spec {
        None => ResponseColumn::Last,
        Some(s) => match s.parse::<usize>() {
            Ok(i) => ResponseColumn::Index(i),
            Err(_) => ResponseColumn::Name(s.clone()),
        },
    }
}

/// Prefixes I/O failures with the path involved.
fn at_path<T>(path: &Path, r: kqr::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        kqr::Error::Io(io) => usage(format!("{}: {io}", path.display())),
        other => CliError::Lib(other),
    })
}

fn read_data(args: &DataArgs) -> Result<Dataset, CliError> {
    let mut ds = at_path(&args.data, load_csv(&args.data, &response_column(&args.response), &csv_options(args.no_header)))?;
    if args.standardize {
        ds.standardize();
    }
    Ok(ds)
}

fn kernel_spec(args: &KernelArgs, x: &DMatrix<f64>) -> Result<KernelSpec, CliError> {
    match args.kernel {
        KernelChoice::Linear => Ok(KernelSpec::linear()),
        KernelChoice::Rbf => {
            let sigma = if args.sigma == "median" {
                median_heuristic_bandwidth(x)?
            } else {
                args.sigma
                    .parse::<f64>()
                    .map_err(|_| usage(format!("--sigma: expected a number or \"median\", got '{}'", args.sigma)))?
            };
            Ok(KernelSpec::rbf(sigma)?)
        }
    }
}

fn solver_config(args: &SolverArgs) -> Result<SolverConfig, CliError> {
    let cfg = SolverConfig {
        kkt_tol: args.kkt_tol,
        max_apgd_iters: args.max_iter,
        ..SolverConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn levels(taus: &[f64]) -> Result<Vec<QuantileLevel>, CliError> {
    Ok(taus.iter().map(|&t| QuantileLevel::new(t)).collect::<kqr::Result<_>>()?)
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    at_path(path, write_atomic(path, text.as_bytes()))
}

pub fn fit(args: &FitArgs) -> CmdResult {
    if args.tau.len() < 2 && args.lambda1.is_some() {
        return Err(usage("--lambda1 needs at least two --tau values"));
    }
    let ds = read_data(&args.data)?;
    let spec = kernel_spec(&args.kernel, &ds.x)?;
    let cfg = solver_config(&args.solver)?;
    let taus = levels(&args.tau)?;
    let (model, build_time) = timed(|| KernelModel::new(&ds.x, spec));
    let model = model?;
    let head = format!("n={} p={} tau={}", ds.n(), ds.p(), join(&args.tau));
    let (fit, summary, certified) = if taus.len() == 1 {
        let (sol, t) = timed(|| solve_kqr(&ds.y, &model, taus[0], args.lambda, &cfg, None));
        let sol = sol?;
        let line = format!(
            "{head} lambda={} kkt={:.3e} iterations={} time={:.3}s",
            args.lambda,
            sol.kkt_residual,
            sol.iterations,
            build_time + t
        );
        let ok = sol.certified;
        (Fit::Kqr(sol), line, ok)
    } else {
        let lambda1 = args.lambda1.unwrap_or(0.0);
        let problem = NckqrProblem::new(taus, lambda1, args.lambda, args.eta)?;
        let (sol, t) = timed(|| solve_nckqr(&ds.y, &model, &problem, &cfg, None));
        let sol = sol?;
        let line = format!(
            "{head} lambda1={lambda1} lambda2={} kkt={:.3e} iterations={} crossing_magnitude={:.3e} time={:.3}s",
            args.lambda,
            sol.kkt_residual,
            sol.iterations,
            sol.crossing_magnitude,
            build_time + t
        );
        let ok = sol.certified;
        (Fit::Nckqr(sol), line, ok)
    };
    let saved = SavedModel {
        kernel: spec,
        x_train: ds.x.clone(),
        standardization: ds.standardization.clone(),
        column_names: ds.column_names.clone(),
        fit,
    };
    at_path(&args.out, save_model(&saved, &args.out))?;
    println!("{summary}");
    Ok(if certified {
        Outcome::Certified
    } else {
        Outcome::Uncertified("fit did not reach the KKT tolerance; model written anyway".into())
    })
}

pub fn predict(args: &PredictArgs) -> CmdResult {
    let model = at_path(&args.model, load_model(&args.model))?;
    let opts = csv_options(args.no_header);
    let x = match &args.response {
        Some(_) => at_path(&args.data, load_csv(&args.data, &response_column(&args.response), &opts))?.x,
        None => at_path(&args.data, load_covariates_csv(&args.data, &opts))?,
    };
    let pred = model.predict(&x)?;
    let taus = model.taus();
    let text = match model.fit {
        Fit::Kqr(_) => predictions_to_csv(&pred, None)?,
        Fit::Nckqr(_) => predictions_to_csv(&pred, Some(&taus))?,
    };
    write_text(&args.out, &text)?;
    println!("wrote {} predictions for {} level(s)", x.nrows(), taus.len());
    Ok(Outcome::Certified)
}

fn lambda_grid(args: &CvArgs) -> Result<Vec<f64>, CliError> {
    if args.lambdas.is_empty() {
        return Ok(log_lambda_grid(args.lambda_max, args.lambda_min, args.lambda_count)?);
    }
    let mut grid = args.lambdas.clone();
    if grid.iter().any(|l| !(*l > 0.0)) {
        return Err(usage("--lambdas: values must be positive"));
    }
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    Ok(grid)
}

pub fn cv(args: &CvArgs) -> CmdResult {
    let ds = read_data(&args.data)?;
    let spec = kernel_spec(&args.kernel, &ds.x)?;
    let cfg = solver_config(&args.solver)?;
    let taus = levels(&args.tau)?;
    let grid = lambda_grid(args)?;
    let mut table = String::new();
    if taus.len() == 1 {
        let (res, t) = timed(|| cross_validate(&ds, &spec, taus[0], &grid, args.folds, args.seed, &cfg));
        let res = res?;
        table.push_str("lambda,mean_loss,std_error\n");
        for j in 0..grid.len() {
            let _ = writeln!(table, "{},{},{}", num(grid[j]), num(res.mean_loss[j]), num(res.std_error[j]));
        }
        write_text(&args.out, &table)?;
        let b = res.best_index();
        println!(
            "selected lambda={} mean_loss={:.6} std_error={:.6} folds={} seed={} time={t:.3}s",
            res.best_lambda, res.mean_loss[b], res.std_error[b], args.folds, args.seed
        );
    } else {
        let (res, t) = timed(|| {
            cross_validate_nckqr(&ds, &spec, &taus, &args.lambda1s, &grid, args.eta, args.folds, args.seed, &cfg)
        });
        let res = res?;
        table.push_str("lambda1,lambda2,mean_loss,std_error\n");
        for (i, &l1) in res.lambda1_grid.iter().enumerate() {
            for (j, &l2) in res.lambda2_grid.iter().enumerate() {
                let c = i * res.lambda2_grid.len() + j;
                let _ = writeln!(table, "{},{},{},{}", num(l1), num(l2), num(res.mean_loss[c]), num(res.std_error[c]));
            }
        }
        write_text(&args.out, &table)?;
        println!(
            "selected lambda1={} lambda2={} folds={} seed={} time={t:.3}s",
            res.best_lambda1, res.best_lambda2, args.folds, args.seed
        );
    }
    Ok(Outcome::Certified)
}

pub fn simulate(args: &SimulateArgs) -> CmdResult {
    let ds = match args.model {
        Design::Friedman => simulate_friedman(args.n, args.p, args.rho, args.snr, args.seed)?,
        Design::Yuan => simulate_yuan(args.n, args.seed)?,
        Design::Heteroscedastic => simulate_heteroscedastic(args.n, args.seed)?,
    };
    write_text(&args.out, &dataset_to_csv(&ds)?)?;
    println!("wrote n={} p={} seed={}", ds.n(), ds.p(), args.seed);
    Ok(Outcome::Certified)
}

/// Largest n for which the reference optimizer is run alongside the paths.
const ORACLE_MAX_N: usize = 100;

pub fn bench(args: &BenchArgs) -> CmdResult {
    let cfg = solver_config(&args.solver)?;
    let tau = QuantileLevel::new(args.tau)?;
    let mut ds = simulate_friedman(args.n, args.p, 0.1, 3.0, args.seed)?;
    ds.standardize();
    let spec = KernelSpec::rbf(median_heuristic_bandwidth(&ds.x)?)?;
    let grid = log_lambda_grid(1.0, 1e-4, args.lambda_count)?;

    let (spectral, t_spectral) = timed(|| {
        let model = KernelModel::new(&ds.x, spec)?;
        solve_kqr_path(&ds.y, &model, tau, &grid, &cfg)
    });
    let spectral = spectral?;
    let (dense, t_dense) = timed(|| {
        let k = build_kernel_matrix(&ds.x, &spec)?;
        solve_kqr_path_dense(&ds.y, &k, tau, &grid, &cfg)
    });
    let dense = dense?;
    let oracle: Option<Vec<f64>> = if args.n <= ORACLE_MAX_N {
        let k = build_kernel_matrix(&ds.x, &spec)?;
        let vals = grid
            .iter()
            .map(|&lambda| {
                reference_smoothed_optimum(&OracleObjective::Kqr { tau, lambda }, &ds.y, k.as_matrix(), 1e-10)
                    .map(|r| r.exact_objective)
            })
            .collect::<kqr::Result<Vec<f64>>>()?;
        Some(vals)
    } else {
        None
    };

    let mut table = String::from("lambda,spectral_objective,dense_objective,oracle_objective,abs_diff,spectral_kkt,dense_kkt\n");
    let mut worst = 0.0_f64;
    for (j, (s, d)) in spectral.iter().zip(&dense).enumerate() {
        let diff = (s.objective - d.objective).abs();
        worst = worst.max(diff);
        let o = oracle.as_ref().map(|v| num(v[j])).unwrap_or_default();
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{}",
            num(grid[j]),
            num(s.objective),
            num(d.objective),
            o,
            num(diff),
            num(s.kkt_residual),
            num(d.kkt_residual)
        );
    }
    write_text(&args.out, &table)?;
    let uncertified = spectral.iter().chain(&dense).filter(|s| !s.certified).count();
    println!("n={} p={} tau={} lambdas={}", args.n, args.p, args.tau, grid.len());
    println!("  spectral path  {t_spectral:>9.3}s");
    println!("  dense baseline {t_dense:>9.3}s");
    println!("  time ratio     {:>9.3}", t_spectral / t_dense);
    println!("  max |objective difference| {worst:.3e}");
    if let Some(v) = &oracle {
        let gap = spectral.iter().zip(v).map(|(s, o)| (s.objective - o).abs()).fold(0.0, f64::max);
        println!("  max |spectral - oracle|    {gap:.3e}");
    }
    Ok(if uncertified == 0 && worst <= 1e-6 {
        Outcome::Certified
    } else {
        Outcome::Uncertified(format!("{uncertified} uncertified fits, max objective difference {worst:.3e}"))
    })
}

pub fn emit_curves(args: &CurvesArgs) -> CmdResult {
    let model = at_path(&args.model, load_model(&args.model))?;
    if model.x_train.ncols() != 1 {
        return Err(usage(format!("emit-curves needs a model with one covariate, found {}", model.x_train.ncols())));
    }
    if args.points < 2 {
        return Err(usage("--points must be at least 2"));
    }
    let raw: Vec<f64> = match &model.standardization {
        Some(stats) => model.x_train.iter().map(|v| v * stats[0].sd + stats[0].mean).collect(),
        None => model.x_train.iter().copied().collect(),
    };
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m = args.points;
    let grid = DMatrix::from_fn(m, 1, |i, _| lo + (hi - lo) * i as f64 / (m - 1) as f64);
    let curves = model.predict(&grid)?;
    let mut text = String::from("x,tau,prediction\n");
    for (curve, tau) in curves.iter().zip(model.taus()) {
        for i in 0..m {
            let _ = writeln!(text, "{},{},{}", num(grid[(i, 0)]), num(tau), num(curve[i]));
        }
    }
    write_text(&args.out, &text)?;
    println!("wrote {m} points for {} level(s)", curves.len());
    Ok(Outcome::Certified)
}

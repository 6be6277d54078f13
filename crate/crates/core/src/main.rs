use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use funcgp::config::{Layered, RunConfig};
use funcgp::experiment::{
    bench_likelihood, default_bandwidth_grid, default_lambda_grid, fit_model, frkhs_baseline,
    predict_from_fit, score, truth_matrix, Fit, FitSettings,
};
use funcgp::io::{
    fmt_f64, read_dataset, read_fit, read_prediction, write_csv, write_dataset, write_depth,
    write_fit, write_metrics, write_prediction, write_summary, MetricsRow,
};
use funcgp::kernel::heuristic_bandwidths;
use funcgp::mcmc::{posterior_summary, split_rhat};
use funcgp::model::{PriorSpec, Theta};
use funcgp::predict::{kernel_baseline, kernel_oracle_bandwidth, PredictMethod, PredictOptions, PredictTarget, PredictionResult};
use funcgp::sim::{depth_coverage_table, per_curve_coverage, simulate, SimConfig, SimKind};
use funcgp::weather::{load_weather, weekly_subsample, DEFAULT_PRECIP_OFFSET};
use funcgp::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "funcgp", version, about = "Gaussian-process regression for functional data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// key=value settings file; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulated train/test sets (`gp` or `freg` design)
    Simulate {
        #[arg(long, default_value = "gp")]
        kind: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        times: Option<usize>,
        #[arg(long)]
        s2: Option<f64>,
        #[arg(long)]
        tau2: Option<f64>,
        #[arg(long)]
        rho1: Option<f64>,
        #[arg(long)]
        rho2: Option<f64>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Weekly weather dataset from daily station CSVs
    Weather {
        #[arg(long)]
        temp: PathBuf,
        #[arg(long)]
        precip: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PRECIP_OFFSET)]
        offset: f64,
        /// Comma-separated station names held out as the test set
        #[arg(long)]
        holdout: Option<String>,
        #[command(flatten)]
        shared: Shared,
    },
    /// MCMC over the hyperparameters
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        /// full, pp or ppdiag
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Predictions on a test set
    Predict {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        fit: Option<PathBuf>,
        /// full, pp, pp_mod1, pp_mod2, frkhs or kernel
        #[arg(long)]
        method: Option<String>,
        /// y or w
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        max_thetas: Option<usize>,
        #[arg(long)]
        draws_per_theta: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
        /// Kernel bandwidth; without it the test-error minimiser over a grid is used
        #[arg(long)]
        bandwidth: Option<f64>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Metrics of prediction files against a test set
    Evaluate {
        /// Prediction CSV, optionally as label=path
        #[arg(long, required = true)]
        pred: Vec<String>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        /// Depth/coverage table for the single prediction file
        #[arg(long)]
        depth_out: Option<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Band depth of each test covariate against per-curve coverage
    Depth {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Time per log-likelihood evaluation for each covariance path
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[command(flatten)]
        shared: Shared,
    },
}

fn layered(shared: &Shared) -> Result<Layered> {
    let mut l = Layered::from_file(shared.config.as_deref())?;
    l.set("seed", shared.seed);
    l.set("out", shared.out.as_ref().map(|p| p.display().to_string()));
    Ok(l)
}

fn cmd_simulate(
    kind: &str,
    sizes: [Option<usize>; 3],
    theta: [Option<f64>; 4],
    shared: &Shared,
) -> Result<()> {
    let l = layered(shared)?;
    let seed = l.get_or("seed", 1)?;
    let mut cfg = match SimKind::parse(kind)? {
        SimKind::Gp => SimConfig::gp(seed),
        SimKind::Freg => SimConfig::freg(seed),
    };
    cfg.n_train = sizes[0].unwrap_or(cfg.n_train);
    cfg.n_test = sizes[1].unwrap_or(cfg.n_test);
    cfg.n_times = sizes[2].unwrap_or(cfg.n_times);
    let t = cfg.theta;
    cfg.theta = Theta::new(
        theta[0].unwrap_or(t.s2),
        theta[1].unwrap_or(t.tau2),
        theta[2].unwrap_or(t.rho1),
        theta[3].unwrap_or(t.rho2),
    )?;
    let out = l.path("out")?;
    let (train, test) = simulate(&cfg)?;
    write_dataset(&out.join("train"), &train)?;
    write_dataset(&out.join("test"), &test)
}

fn cmd_weather(temp: &Path, precip: &Path, offset: f64, holdout: Option<&str>, shared: &Shared) -> Result<()> {
    let l = layered(shared)?;
    let out = l.path("out")?;
    let data = weekly_subsample(&load_weather(temp, precip)?, offset)?;
    match holdout {
        Some(list) => {
            let names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
            let (train, test) = data.split_by_labels(&names)?;
            write_dataset(&out.join("train"), &train)?;
            write_dataset(&out.join("test"), &test)
        }
        None => write_dataset(&out.join("train"), &data),
    }
}

fn cmd_fit(l: &Layered) -> Result<()> {
    let cfg = RunConfig::from_layered(l)?;
    let train = read_dataset(&l.path("data")?)?;
    let out = l.path("out")?;
    let priors = cfg.priors(PriorSpec::from_data(&train)?)?;
    let settings = FitSettings { kind: cfg.kind, m: cfg.m, q: cfg.q, mcmc: cfg.mcmc.clone(), priors: Some(priors) };
    let fit = fit_model(&train, &settings)?;
    if let Some(failed) = fit.samples.meta.get("failed_chains") {
        eprintln!("warning: chains {failed} failed and were dropped");
    }
    write_fit(&out, &fit.samples, fit.knots.as_ref(), &fit.priors)?;
    let summary = posterior_summary(&fit.samples, 0.95)?;
    let rhat = split_rhat(&fit.samples)?;
    write_summary(&out.join("summary.csv"), cfg.kind.name(), &summary, Some(&rhat))
}

fn cmd_predict(l: &Layered, bandwidth: Option<f64>) -> Result<()> {
    let train = read_dataset(&l.path("data")?)?;
    let test = read_dataset(&l.path("test")?)?;
    let out = l.path("out")?;
    let method: String = l.get_or("method", "full".to_string())?;
    let result = match method.as_str() {
        "frkhs" => PredictionResult::point(frkhs_baseline(&train, &test.x, &default_lambda_grid())?.0),
        "kernel" => {
            let h = match bandwidth {
                Some(h) => h,
                None => {
                    let grid = default_bandwidth_grid(&train)?;
                    kernel_oracle_bandwidth(&train, &test.x, truth_matrix(&test), &grid)?.0
                }
            };
            PredictionResult::point(kernel_baseline(&train, &test.x, h)?.0)
        }
        other => {
            let method = PredictMethod::parse(other)?;
            let target = match l.get_or("target", "y".to_string())?.as_str() {
                "y" => PredictTarget::Y,
                "w" => PredictTarget::W,
                t => return Err(Error::Config(format!("unknown target '{t}'"))),
            };
            let options = PredictOptions {
                method,
                target,
                draws_per_theta: l.get_or("draws_per_theta", 1)?,
                max_thetas: l.get_or("max_thetas", 0)?,
                level: l.get_or("level", 0.95)?,
            };
            let stored = read_fit(&l.path("fit")?, &train)?;
            let fit = Fit { samples: stored.samples, knots: stored.knots, priors: stored.priors };
            predict_from_fit(&fit, &train, &test.x, &options, l.get_or("seed", 1)?)?
        }
    };
    write_prediction(&out, &result, test.grid())
}

fn split_label(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => {
            let p = PathBuf::from(spec);
            let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (label, p)
        }
    }
}

fn cmd_evaluate(preds: &[String], test: &Path, train: Option<&Path>, depth_out: Option<&Path>, shared: &Shared) -> Result<()> {
    let l = layered(shared)?;
    let out = l.path("out")?;
    let test = read_dataset(test)?;
    if depth_out.is_some() && (preds.len() != 1 || train.is_none()) {
        return Err(Error::Config("--depth-out needs --train and exactly one --pred".into()));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for spec in preds {
        let (method, path) = split_label(spec);
        let result = read_prediction(&path)?;
        let s = score(&result, &test)?;
        rows.push(MetricsRow { method, mse: s.mse, coverage: s.coverage, mean_length: s.mean_length });
        if let (Some(d), Some(tr)) = (depth_out, train) {
            let train = read_dataset(tr)?;
            write_depth(d, &depth_coverage_table(&test.x, &train.x, &s.per_curve)?)?;
        }
    }
    write_metrics(&out, &rows)
}

fn cmd_depth(train: &Path, test: &Path, pred: &Path, shared: &Shared) -> Result<()> {
    let l = layered(shared)?;
    let train = read_dataset(train)?;
    let test = read_dataset(test)?;
    let result = read_prediction(pred)?;
    let cov = per_curve_coverage(&result, test.y_matrix())?;
    let table = depth_coverage_table(&test.x, &train.x, &cov)?;
    write_depth(&l.path("out")?, &table)?;
    let note = if table.correlation.degenerate { " (degenerate)" } else { "" };
    println!("pearson {}{note}", fmt_f64(table.correlation.value));
    Ok(())
}

fn cmd_bench(l: &Layered, reps: usize) -> Result<()> {
    let data = read_dataset(&l.path("data")?)?;
    let (r1, r2) = heuristic_bandwidths(&data.x, data.grid())?;
    let theta = Theta::new(1.0, 0.1, r1, r2)?;
    let report = bench_likelihood(&data, &theta, l.get_or("m", 30)?, l.get_or("q", 10)?, reps)?;
    let header: Vec<String> = ["path", "n_obs", "seconds_per_eval", "speedup_vs_dense"].iter().map(|s| s.to_string()).collect();
    let rows = [("full_dense", report.full_dense), ("full_kron", report.full_kron), ("pp", report.pp)].map(|(name, t)| {
        vec![name.to_string(), report.n_obs.to_string(), fmt_f64(t), fmt_f64(report.full_dense / t)]
    });
    for r in &rows {
        println!("{}", r.join(","));
    }
    match l.get::<PathBuf>("out")? {
        Some(out) => write_csv(&out, &header, rows),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { kind, n, n_test, times, s2, tau2, rho1, rho2, shared } => {
            cmd_simulate(&kind, [n, n_test, times], [s2, tau2, rho1, rho2], &shared)
        }
        Command::Weather { temp, precip, offset, holdout, shared } => {
            cmd_weather(&temp, &precip, offset, holdout.as_deref(), &shared)
        }
        Command::Fit { data, kind, m, q, chains, iters, burnin, shared } => {
            let mut l = layered(&shared)?;
            l.set("data", data.map(|p| p.display().to_string()));
            l.set("kind", kind);
            l.set("m", m);
            l.set("q", q);
            l.set("chains", chains);
            l.set("iters", iters);
            l.set("burnin", burnin);
            cmd_fit(&l)
        }
        Command::Predict { data, test, fit, method, target, max_thetas, draws_per_theta, level, bandwidth, shared } => {
            let mut l = layered(&shared)?;
            l.set("data", data.map(|p| p.display().to_string()));
            l.set("test", test.map(|p| p.display().to_string()));
            l.set("fit", fit.map(|p| p.display().to_string()));
            l.set("method", method);
            l.set("target", target);
            l.set("max_thetas", max_thetas);
            l.set("draws_per_theta", draws_per_theta);
            l.set("level", level);
            cmd_predict(&l, bandwidth)
        }
        Command::Evaluate { pred, test, train, depth_out, shared } => {
            cmd_evaluate(&pred, &test, train.as_deref(), depth_out.as_deref(), &shared)
        }
        Command::Depth { train, test, pred, shared } => cmd_depth(&train, &test, &pred, &shared),
        Command::Bench { data, m, q, reps, shared } => {
            let mut l = layered(&shared)?;
            l.set("data", data.map(|p| p.display().to_string()));
            l.set("m", m);
            l.set("q", q);
            cmd_bench(&l, reps)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

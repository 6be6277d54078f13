//! Fit, predict and score in one place, shared by the binary and the tests.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::kernel::{heuristic_bandwidths, CurveSet};
use crate::mcmc::{run_chains, McmcConfig, Posterior, PosteriorSamples};
use crate::model::{
    select_knots, CovarianceKind, CovarianceSpec, FullPath, KnotSet, LikelihoodEvaluator, PriorSpec,
    Theta,
};
use crate::predict::{
    bayes_predict, frkhs_cv, frkhs_predict, PredictMethod, PredictOptions, PredictionResult,
};
use crate::sim::{coverage_and_length, mse, per_curve_coverage};

/// Knot-selection stream, kept apart from the chain streams.
const KNOT_STREAM: u64 = 1 << 32;
const PREDICT_STREAM: u64 = (1 << 32) + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub kind: CovarianceKind,
    pub m: usize,
    pub q: usize,
    pub mcmc: McmcConfig,
    pub priors: Option<PriorSpec<f64>>,
}

impl FitSettings {
    pub fn new(kind: CovarianceKind, mcmc: McmcConfig) -> Self {
        Self { kind, m: 30, q: 10, mcmc, priors: None }
    }
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub samples: PosteriorSamples<f64>,
    pub knots: Option<KnotSet<f64>>,
    pub priors: PriorSpec<f64>,
}

/// Knots drawn from a generator seeded by `seed`, so fits that share a seed
/// share their knots.
pub fn knots_for(train: &FunctionalDataset<f64>, m: usize, q: usize, seed: u64) -> Result<KnotSet<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(KNOT_STREAM);
    select_knots(&train.x, m, train.grid(), q, &mut rng)
}

pub fn fit_model(train: &FunctionalDataset<f64>, settings: &FitSettings) -> Result<Fit> {
    let priors = match settings.priors {
        Some(p) => p,
        None => PriorSpec::from_data(train)?,
    };
    let knots = match settings.kind {
        CovarianceKind::Full => None,
        _ => Some(knots_for(train, settings.m, settings.q, settings.mcmc.seed)?),
    };
    let spec = CovarianceSpec { kind: settings.kind, knots: knots.clone() };
    let target = Posterior { evaluator: LikelihoodEvaluator::new(train, &spec)?, priors };
    let samples = run_chains(&target, &settings.mcmc)?;
    Ok(Fit { samples, knots, priors })
}

pub fn predict_from_fit(
    fit: &Fit,
    train: &FunctionalDataset<f64>,
    x_test: &CurveSet<f64>,
    options: &PredictOptions,
    seed: u64,
) -> Result<PredictionResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PREDICT_STREAM);
    bayes_predict(&fit.samples, train, fit.knots.as_ref(), x_test, options, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub mse: f64,
    pub coverage: f64,
    pub mean_length: f64,
    pub per_curve: Vec<f64>,
}

/// Point error against `W` when the latent truth is known (otherwise
/// against `Y`); coverage always against the observed responses.
pub fn score(result: &PredictionResult, test: &FunctionalDataset<f64>) -> Result<Scores> {
    let truth = test.w_true.as_ref().unwrap_or(&test.y).values();
    let (coverage, mean_length) = coverage_and_length(result, test.y_matrix())?;
    Ok(Scores {
        mse: mse(&result.mean, truth)?,
        coverage,
        mean_length,
        per_curve: per_curve_coverage(result, test.y_matrix())?,
    })
}

/// Mean wall time per log-likelihood evaluation, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub n_obs: usize,
    pub full_dense: f64,
    pub full_kron: f64,
    pub pp: f64,
}

fn time_evals(eval: &LikelihoodEvaluator<f64>, theta: &Theta<f64>, reps: usize) -> Result<f64> {
    eval.evaluate(theta)?;
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(eval.evaluate(std::hint::black_box(theta))?);
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

pub fn bench_likelihood(
    data: &FunctionalDataset<f64>,
    theta: &Theta<f64>,
    m: usize,
    q: usize,
    reps: usize,
) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::InvalidParameter("need at least one repetition".into()));
    }
    let full = LikelihoodEvaluator::new(data, &CovarianceSpec::full())?;
    let dense = full.clone().with_full_path(FullPath::Dense);
    let knots = knots_for(data, m.min(data.n_curves()), q.min(data.n_times()), 0)?;
    let pp = LikelihoodEvaluator::new(data, &CovarianceSpec::pred_proc(knots))?;
    Ok(BenchReport {
        n_obs: data.n_curves() * data.n_times(),
        full_dense: time_evals(&dense, theta, reps)?,
        full_kron: time_evals(&full, theta, reps)?,
        pp: time_evals(&pp, theta, reps)?,
    })
}

/// Predictions of one method on a test set, with the fit they came from.
pub fn run_method(
    train: &FunctionalDataset<f64>,
    test: &FunctionalDataset<f64>,
    fit: &Fit,
    method: PredictMethod,
    max_thetas: usize,
    seed: u64,
) -> Result<(PredictionResult, Scores)> {
    let options = PredictOptions { max_thetas, ..PredictOptions::new(method) };
    let result = predict_from_fit(fit, train, &test.x, &options, seed)?;
    let scores = score(&result, test)?;
    Ok((result, scores))
}

pub fn truth_matrix(test: &FunctionalDataset<f64>) -> &DMatrix<f64> {
    test.w_true.as_ref().unwrap_or(&test.y).values()
}

/// `10^-4, 10^-3.5, ..., 10^2`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=12).map(|k| 10f64.powf(-4.0 + 0.5 * k as f64)).collect()
}

/// Multiples `2^-4 .. 2^4` of the mean pairwise covariate distance.
pub fn default_bandwidth_grid(train: &FunctionalDataset<f64>) -> Result<Vec<f64>> {
    let (r1, _) = heuristic_bandwidths(&train.x, train.grid())?;
    Ok((-8..=8).map(|k| r1 * 2f64.powf(0.5 * k as f64)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrkhsChoice {
    pub lambda: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub cv_error: f64,
}

/// fRKHS with heuristic bandwidths and `lambda` chosen by cross-validation.
pub fn frkhs_baseline(
    train: &FunctionalDataset<f64>,
    x_test: &CurveSet<f64>,
    lambda_grid: &[f64],
) -> Result<(DMatrix<f64>, FrkhsChoice)> {
    let (rho1, rho2) = heuristic_bandwidths(&train.x, train.grid())?;
    let (lambda, cv_error) = frkhs_cv(train, lambda_grid, rho1, rho2)?;
    let pred = frkhs_predict(lambda, rho1, rho2, train, x_test)?;
    Ok((pred, FrkhsChoice { lambda, rho1, rho2, cv_error }))
}

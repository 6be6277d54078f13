//! Predictive distributions for new covariate curves and the two non-Bayesian
//! baselines (fRKHS and the functional kernel estimator).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::kernel::{cross_distances, gram_from_distances, pairwise_distances, time_distances, CurveSet};
use crate::linalg::{unvec, KronEigen, LowRankFactor, Whitened};
use crate::mcmc::{quantile_sorted, PosteriorSamples};
use crate::model::{CovarianceKind, KnotGeometry, KnotSet, Theta};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredictMethod {
    Full,
    Pp,
    PpMod1,
    PpMod2,
}

impl PredictMethod {
    pub const ALL: [PredictMethod; 4] = [Self::Full, Self::Pp, Self::PpMod1, Self::PpMod2];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Pp => "pp",
            Self::PpMod1 => "pp_mod1",
            Self::PpMod2 => "pp_mod2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "pp" => Ok(Self::Pp),
            "pp_mod1" | "mod1" => Ok(Self::PpMod1),
            "pp_mod2" | "mod2" => Ok(Self::PpMod2),
            other => Err(Error::Config(format!("unknown prediction method '{other}'"))),
        }
    }

    /// Likelihood the posterior draws must come from.
    pub fn required_kind(self) -> CovarianceKind {
        match self {
            Self::Full => CovarianceKind::Full,
            Self::Pp | Self::PpMod1 => CovarianceKind::PredProc,
            Self::PpMod2 => CovarianceKind::PredProcDiag,
        }
    }
}

/// Whether intervals describe the noisy response or the latent process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictTarget {
    #[default]
    Y,
    W,
}

/// Gaussian conditional of `W` on the test curves for one `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPrediction<T: Real> {
    pub mean: DMatrix<T>,
    pub var: DMatrix<T>,
}

/// Per-`theta` predictive computations with every distance cached.
#[derive(Debug, Clone)]
pub struct Predictor<T: Real> {
    method: PredictMethod,
    y: DMatrix<T>,
    train_dist: DMatrix<T>,
    time_dist: DMatrix<T>,
    test_train_dist: DMatrix<T>,
    knots: Option<(KnotGeometry<T>, DMatrix<T>)>,
}

impl<T: Real> Predictor<T> {
    pub fn new(
        method: PredictMethod,
        data: &FunctionalDataset<T>,
        knots: Option<&KnotSet<T>>,
        x_test: &CurveSet<T>,
    ) -> Result<Self> {
        if x_test.grid() != data.grid() {
            return Err(Error::Dimension(
                "test curves must be sampled on the training grid".into(),
            ));
        }
        let knots = match (method, knots) {
            (PredictMethod::Full, _) => None,
            (_, None) => {
                return Err(Error::Config(format!(
                    "method {} requires knots",
                    method.name()
                )))
            }
            (_, Some(k)) => Some((
                KnotGeometry::new(&data.x, data.grid(), k)?,
                cross_distances(x_test, &k.covariate_knots)?,
            )),
        };
        let p = data.grid().points();
        Ok(Self {
            method,
            y: data.y_matrix().clone(),
            train_dist: pairwise_distances(&data.x),
            time_dist: time_distances(p, p),
            test_train_dist: cross_distances(x_test, &data.x)?,
            knots,
        })
    }

    pub fn method(&self) -> PredictMethod {
        self.method
    }

    pub fn n_test(&self) -> usize {
        self.test_train_dist.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.y.ncols()
    }

    pub fn conditional(&self, theta: &Theta<T>) -> Result<ConditionalPrediction<T>> {
        theta.validate()?;
        match self.method {
            PredictMethod::Full => self.full(theta),
            _ => self.low_rank(theta),
        }
    }

    fn full(&self, theta: &Theta<T>) -> Result<ConditionalPrediction<T>> {
        let (s2, tau2) = (theta.s2, theta.tau2);
        let a = gram_from_distances(&self.train_dist, theta.rho1)?;
        let k = gram_from_distances(&self.time_dist, theta.rho2)?;
        let a_tst = gram_from_distances(&self.test_train_dist, theta.rho1)?;
        let eig = KronEigen::new(&a, &k)?;
        let alpha = eig.solve_matrix(s2, tau2, &self.y)?;
        let mean = (&a_tst * alpha * &k) * s2;

        let b = (&a_tst * eig.a_vecs()).map(|v| v * v);
        let g = (&k * eig.k_vecs()).map(|v| v * v);
        let w = DMatrix::from_fn(eig.n_curves(), eig.n_times(), |i, l| {
            T::one() / (s2 * eig.a_vals()[i] * eig.k_vals()[l] + tau2)
        });
        let explained = b * w * g.transpose();
        let var = explained.map(|e| (s2 - s2 * s2 * e).max(T::zero()));
        Ok(ConditionalPrediction { mean, var })
    }

    fn low_rank(&self, theta: &Theta<T>) -> Result<ConditionalPrediction<T>> {
        let (geo, test_knot) = self.knots.as_ref().expect("knots checked at construction");
        let cov = match self.method {
            PredictMethod::PpMod2 => geo.ppdiag_cov(theta)?,
            _ => geo.pp_cov(theta)?,
        };
        let smw = cov.factorize()?;
        let test_factor = LowRankFactor::Kron(
            gram_from_distances(test_knot, theta.rho1)?,
            gram_from_distances(&geo.time_knot, theta.rho2)?,
        );
        let v = Whitened::new(&test_factor, &cov.core)?;
        let (nt, t) = (self.n_test(), self.n_times());

        let y = crate::linalg::vec_rows(&self.y);
        let mean = unvec(&v.mul(&smw.knot_weights(&y)), nt, t);

        let quad = smw.quad_diag(&v)?;
        let var = match self.method {
            PredictMethod::Pp => quad.map(|q| q.max(T::zero())),
            _ => {
                let rows = v.row_sq_norms();
                quad.zip_map(&rows, |q, r| (theta.s2 - r + q).max(T::zero()))
            }
        };
        Ok(ConditionalPrediction {
            mean,
            var: unvec(&var, nt, t),
        })
    }
}

/// Kriging mean and pointwise variance of `W` under the full model.
pub fn posterior_w_full<T: Real>(
    theta: &Theta<T>,
    data: &FunctionalDataset<T>,
    x_test: &CurveSet<T>,
) -> Result<ConditionalPrediction<T>> {
    Predictor::new(PredictMethod::Full, data, None, x_test)?.conditional(theta)
}

/// Unmodified predictive-process conditional.
pub fn predict_pp<T: Real>(
    theta: &Theta<T>,
    data: &FunctionalDataset<T>,
    knots: &KnotSet<T>,
    x_test: &CurveSet<T>,
) -> Result<ConditionalPrediction<T>> {
    Predictor::new(PredictMethod::Pp, data, Some(knots), x_test)?.conditional(theta)
}

/// Predictive process with the exact test-block variance `s2`.
pub fn predict_pp_mod1<T: Real>(
    theta: &Theta<T>,
    data: &FunctionalDataset<T>,
    knots: &KnotSet<T>,
    x_test: &CurveSet<T>,
) -> Result<ConditionalPrediction<T>> {
    Predictor::new(PredictMethod::PpMod1, data, Some(knots), x_test)?.conditional(theta)
}

/// Predictive process with diagonal-corrected training and test blocks.
pub fn predict_pp_mod2<T: Real>(
    theta: &Theta<T>,
    data: &FunctionalDataset<T>,
    knots: &KnotSet<T>,
    x_test: &CurveSet<T>,
) -> Result<ConditionalPrediction<T>> {
    Predictor::new(PredictMethod::PpMod2, data, Some(knots), x_test)?.conditional(theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOptions {
    pub method: PredictMethod,
    pub target: PredictTarget,
    pub draws_per_theta: usize,
    /// Upper bound on the number of posterior draws used; 0 means all.
    pub max_thetas: usize,
    pub level: f64,
}

impl PredictOptions {
    pub fn new(method: PredictMethod) -> Self {
        Self {
            method,
            target: PredictTarget::Y,
            draws_per_theta: 1,
            max_thetas: 0,
            level: 0.95,
        }
    }
}

/// Posterior predictive summary on an `n_test x T` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub target: PredictTarget,
    pub n_thetas: usize,
}

impl PredictionResult {
    /// Point predictions without interval information (baselines).
    pub fn point(mean: DMatrix<f64>) -> Self {
        let z = DMatrix::zeros(mean.nrows(), mean.ncols());
        Self {
            var: z,
            lower: mean.clone(),
            upper: mean.clone(),
            mean,
            target: PredictTarget::Y,
            n_thetas: 0,
        }
    }
}

const THETA_CHUNK: usize = 64;

/// Composition sampling: one conditional normal per retained `theta`,
/// `draws_per_theta` draws from each, pooled into empirical intervals.
pub fn bayes_predict<T: Real, R: Rng + ?Sized>(
    samples: &PosteriorSamples<T>,
    data: &FunctionalDataset<T>,
    knots: Option<&KnotSet<T>>,
    x_test: &CurveSet<T>,
    options: &PredictOptions,
    rng: &mut R,
) -> Result<PredictionResult> {
    if let Some(kind) = samples.kind {
        if kind != options.method.required_kind() {
            return Err(Error::Config(format!(
                "method {} needs draws from the {} likelihood, got {}",
                options.method.name(),
                options.method.required_kind().name(),
                kind.name()
            )));
        }
    }
    if options.draws_per_theta == 0 {
        return Err(Error::InvalidParameter("draws_per_theta must be positive".into()));
    }
    let thetas = samples.thinned(options.max_thetas);
    if thetas.is_empty() {
        return Err(Error::InsufficientData("no posterior draws".into()));
    }
    let predictor = Predictor::new(options.method, data, knots, x_test)?;
    let (nt, t) = (predictor.n_test(), predictor.n_times());
    let cells = nt * t;
    let per_cell = thetas.len() * options.draws_per_theta;
    let base_seed: u64 = rng.random();

    let mut mean_acc = vec![0.0f64; cells];
    let mut draws = vec![0.0f64; cells * per_cell];
    for (chunk_no, chunk) in thetas.chunks(THETA_CHUNK).enumerate() {
        let conds: Vec<Result<ConditionalPrediction<T>>> =
            chunk.par_iter().map(|th| predictor.conditional(th)).collect();
        for (offset, (th, cond)) in chunk.iter().zip(conds).enumerate() {
            let cond = cond?;
            let idx = chunk_no * THETA_CHUNK + offset;
            let mut local = ChaCha8Rng::seed_from_u64(base_seed);
            local.set_stream(idx as u64);
            let noise = match options.target {
                PredictTarget::Y => th.tau2.as_f64(),
                PredictTarget::W => 0.0,
            };
            for c in 0..cells {
                let (i, j) = (c / t, c % t);
                let m = cond.mean[(i, j)].as_f64();
                let sd = (cond.var[(i, j)].as_f64() + noise).max(0.0).sqrt();
                mean_acc[c] += m;
                for d in 0..options.draws_per_theta {
                    let z: f64 = local.sample(StandardNormal);
                    draws[c * per_cell + idx * options.draws_per_theta + d] = m + sd * z;
                }
            }
        }
    }

    let a = (1.0 - options.level) / 2.0;
    let n_theta = thetas.len() as f64;
    let mut mean = DMatrix::zeros(nt, t);
    let mut var = DMatrix::zeros(nt, t);
    let mut lower = DMatrix::zeros(nt, t);
    let mut upper = DMatrix::zeros(nt, t);
    for c in 0..cells {
        let (i, j) = (c / t, c % t);
        let cell = &mut draws[c * per_cell..(c + 1) * per_cell];
        let m = mean_acc[c] / n_theta;
        let dm = cell.iter().sum::<f64>() / per_cell as f64;
        let v = if per_cell > 1 {
            cell.iter().map(|x| (x - dm).powi(2)).sum::<f64>() / (per_cell - 1) as f64
        } else {
            0.0
        };
        cell.sort_by(f64::total_cmp);
        mean[(i, j)] = m;
        var[(i, j)] = v;
        lower[(i, j)] = quantile_sorted(cell, a).min(m);
        upper[(i, j)] = quantile_sorted(cell, 1.0 - a).max(m);
    }
    Ok(PredictionResult {
        mean,
        var,
        lower,
        upper,
        target: options.target,
        n_thetas: thetas.len(),
    })
}

fn frkhs_eigen<T: Real>(rho1: T, rho2: T, data: &FunctionalDataset<T>) -> Result<KronEigen<T>> {
    let p = data.grid().points();
    let a = gram_from_distances(&pairwise_distances(&data.x), rho1)?;
    let k = gram_from_distances(&time_distances(p, p), rho2)?;
    KronEigen::new(&a, &k)
}

fn check_lambda<T: Real>(lambda: T, eig: &KronEigen<T>) -> Result<()> {
    if !(lambda >= T::zero() && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be non-negative and finite, got {lambda}"
        )));
    }
    if lambda == T::zero() {
        let top = eig.a_vals().max() * eig.k_vals().max();
        let low = eig.a_vals().min() * eig.k_vals().min();
        if !(low > top * T::lit(1e-12)) {
            return Err(Error::Numerical(
                "A kron K is singular; lambda = 0 is not allowed".into(),
            ));
        }
    }
    Ok(())
}

/// `(A kron K)(A kron K + lambda I)^-1 Y` as an `n x T` matrix.
pub fn frkhs_fit<T: Real>(lambda: T, rho1: T, rho2: T, data: &FunctionalDataset<T>) -> Result<DMatrix<T>> {
    let eig = frkhs_eigen(rho1, rho2, data)?;
    check_lambda(lambda, &eig)?;
    Ok(eig.filter(data.y_matrix(), |a, k| {
        let p = a * k;
        p / (p + lambda)
    }))
}

/// fRKHS predictions at new covariates: `(A_tst kron K)(A kron K + lambda I)^-1 Y`.
pub fn frkhs_predict<T: Real>(
    lambda: T,
    rho1: T,
    rho2: T,
    data: &FunctionalDataset<T>,
    x_test: &CurveSet<T>,
) -> Result<DMatrix<T>> {
    let eig = frkhs_eigen(rho1, rho2, data)?;
    check_lambda(lambda, &eig)?;
    frkhs_apply(&eig, lambda, rho1, rho2, data, x_test)
}

fn frkhs_apply<T: Real>(
    eig: &KronEigen<T>,
    lambda: T,
    rho1: T,
    rho2: T,
    data: &FunctionalDataset<T>,
    x_test: &CurveSet<T>,
) -> Result<DMatrix<T>> {
    let p = data.grid().points();
    let a_tst = gram_from_distances(&cross_distances(x_test, &data.x)?, rho1)?;
    let k = gram_from_distances(&time_distances(p, p), rho2)?;
    let alpha = eig.filter(data.y_matrix(), |a, kk| T::one() / (a * kk + lambda));
    Ok(a_tst * alpha * k)
}

pub const CV_FOLDS: usize = 5;

/// Five-fold cross-validation over curves (fold of curve `i` is `i % 5`).
/// Returns the winning `lambda` and its mean squared prediction error;
/// ties go to the smaller `lambda`.
pub fn frkhs_cv<T: Real>(
    data: &FunctionalDataset<T>,
    lambda_grid: &[T],
    rho1: T,
    rho2: T,
) -> Result<(T, T)> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidParameter("lambda grid is empty".into()));
    }
    let n = data.n_curves();
    if n < CV_FOLDS {
        return Err(Error::InsufficientData(format!(
            "{CV_FOLDS}-fold cross-validation needs at least {CV_FOLDS} curves, got {n}"
        )));
    }
    let mut grid = lambda_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    grid.dedup();

    let mut sse = vec![T::zero(); grid.len()];
    for fold in 0..CV_FOLDS {
        let test_idx: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS == fold).collect();
        let train_idx: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS != fold).collect();
        let train = data.select(&train_idx);
        let test = data.select(&test_idx);
        let eig = frkhs_eigen(rho1, rho2, &train)?;
        for (g, &lambda) in grid.iter().enumerate() {
            check_lambda(lambda, &eig)?;
            let pred = frkhs_apply(&eig, lambda, rho1, rho2, &train, &test.x)?;
            sse[g] += (pred - test.y_matrix()).norm_squared();
        }
    }
    let total = T::from_count(n * data.n_times());
    let mut best = 0;
    for g in 1..grid.len() {
        if sse[g] < sse[best] {
            best = g;
        }
    }
    Ok((grid[best], sse[best] / total))
}

/// Nadaraya-Watson functional regression with Gaussian weights on the L2
/// distance. Returns the predictions and the number of test curves whose
/// weights all vanished (those fall back to the mean response).
pub fn kernel_baseline<T: Real>(
    data: &FunctionalDataset<T>,
    x_test: &CurveSet<T>,
    h: T,
) -> Result<(DMatrix<T>, usize)> {
    if !(h > T::zero()) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")));
    }
    let d = cross_distances(x_test, &data.x)?;
    kernel_from_distances(&d, data.y_matrix(), h)
}

fn kernel_from_distances<T: Real>(d: &DMatrix<T>, y: &DMatrix<T>, h: T) -> Result<(DMatrix<T>, usize)> {
    let (nt, n) = d.shape();
    let mut out = DMatrix::zeros(nt, y.ncols());
    let mut fallbacks = 0;
    let mean_curve = y.row_mean();
    for p in 0..nt {
        let logw: Vec<T> = (0..n)
            .map(|i| {
                let di = d[(p, i)];
                if di == T::zero() {
                    T::zero()
                } else {
                    -(di * di) / (h * h)
                }
            })
            .collect();
        let top = logw.iter().copied().fold(T::neg_infinity(), |a, b| a.max(b));
        let w: Vec<T> = if top.is_finite() {
            logw.iter().map(|&l| (l - top).exp()).collect()
        } else {
            vec![T::zero(); n]
        };
        let total = w.iter().fold(T::zero(), |a, &b| a + b);
        if !(total > T::zero() && total.is_finite()) {
            fallbacks += 1;
            out.row_mut(p).copy_from(&mean_curve);
            continue;
        }
        for i in 0..n {
            let wi = w[i] / total;
            for j in 0..y.ncols() {
                out[(p, j)] += wi * y[(i, j)];
            }
        }
    }
    Ok((out, fallbacks))
}

/// Bandwidth from `h_grid` minimising test error against `truth`.
pub fn kernel_oracle_bandwidth<T: Real>(
    data: &FunctionalDataset<T>,
    x_test: &CurveSet<T>,
    truth: &DMatrix<T>,
    h_grid: &[T],
) -> Result<(T, T)> {
    if h_grid.is_empty() {
        return Err(Error::InvalidParameter("bandwidth grid is empty".into()));
    }
    let d = cross_distances(x_test, &data.x)?;
    let mut best: Option<(T, T)> = None;
    for &h in h_grid {
        if !(h > T::zero()) {
            return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")));
        }
        let (pred, _) = kernel_from_distances(&d, data.y_matrix(), h)?;
        if pred.shape() != truth.shape() {
            return Err(Error::Dimension("truth does not match the test set".into()));
        }
        let err = (pred - truth).norm_squared() / T::from_count(truth.len());
        if best.is_none_or(|(_, e)| err < e) {
            best = Some((h, err));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

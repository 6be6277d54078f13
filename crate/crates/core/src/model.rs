//! Covariance models for `y_i(t_j) = W(x_i, t_j) + eps_ij` with the separable
//! process covariance `s2 * a(||x - x'||) * k(|t - t'|)`, their predictive-process
//! approximations, the Gaussian marginal likelihood and the priors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::kernel::{
    covariate_gram, cross_distances, gram_from_distances, heuristic_bandwidths, linspace,
    pairwise_distances, time_distances, time_gram, CurveSet, GramMatrix, TimeGrid,
};
use crate::linalg::{
    dense_logdet, dense_solve, gram_cholesky, CoreFactor, KronEigen, KronFullCov, LowRankFactor,
    LowRankPlusDiag,
};
use crate::scalar::Real;

pub const PARAM_NAMES: [&str; 4] = ["s2", "tau2", "rho1", "rho2"];

/// Model hyperparameters: process variance, nugget variance and the two
/// kernel bandwidths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta<T> {
    pub s2: T,
    pub tau2: T,
    pub rho1: T,
    pub rho2: T,
}

impl<T: Real> Theta<T> {
    pub fn new(s2: T, tau2: T, rho1: T, rho2: T) -> Result<Self> {
        let theta = Self { s2, tau2, rho1, rho2 };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in PARAM_NAMES.iter().zip(self.to_array()) {
            if !(v > T::zero() && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.s2, self.tau2, self.rho1, self.rho2]
    }

    pub fn from_array(v: [T; 4]) -> Self {
        Self {
            s2: v[0],
            tau2: v[1],
            rho1: v[2],
            rho2: v[3],
        }
    }

    pub fn get(&self, k: usize) -> T {
        self.to_array()[k]
    }

    pub fn with(&self, k: usize, value: T) -> Self {
        let mut v = self.to_array();
        v[k] = value;
        Self::from_array(v)
    }
}

/// Smoothing parameter of the equivalent fRKHS fit, `tau2 / s2`.
pub fn lambda_of<T: Real>(theta: &Theta<T>) -> T {
    theta.tau2 / theta.s2
}

/// Inverse-gamma priors on the variances and uniform priors on the bandwidths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec<T> {
    pub s2_shape: T,
    pub s2_scale: T,
    pub tau2_shape: T,
    pub tau2_scale: T,
    pub rho1_lo: T,
    pub rho1_hi: T,
    pub rho2_lo: T,
    pub rho2_hi: T,
}

impl<T: Real> PriorSpec<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.s2_shape, self.s2_scale, self.tau2_shape, self.tau2_scale];
        if positive.iter().any(|&v| !(v > T::zero() && v.is_finite())) {
            return Err(Error::InvalidParameter(
                "inverse-gamma shapes and scales must be positive".into(),
            ));
        }
        for (lo, hi, name) in [
            (self.rho1_lo, self.rho1_hi, "rho1"),
            (self.rho2_lo, self.rho2_hi, "rho2"),
        ] {
            if !(lo > T::zero() && lo < hi && hi.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} support must satisfy 0 < lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// IG(2, 3) on `s2`, IG(2, 0.1) on `tau2`, uniform on `[rho/10, 10 rho]`
    /// around the supplied bandwidth guides.
    pub fn weakly_informative(rho1_hat: T, rho2_hat: T) -> Self {
        let ten = T::lit(10.0);
        Self {
            s2_shape: T::lit(2.0),
            s2_scale: T::lit(3.0),
            tau2_shape: T::lit(2.0),
            tau2_scale: T::lit(0.1),
            rho1_lo: rho1_hat / ten,
            rho1_hi: rho1_hat * ten,
            rho2_lo: rho2_hat / ten,
            rho2_hi: rho2_hat * ten,
        }
    }

    /// [`PriorSpec::weakly_informative`] with guides from
    /// [`heuristic_bandwidths`] on the training covariates.
    pub fn from_data(data: &FunctionalDataset<T>) -> Result<Self> {
        let (r1, r2) = heuristic_bandwidths(&data.x, data.grid())?;
        Ok(Self::weakly_informative(r1, r2))
    }

    pub fn bounds(&self, k: usize) -> Option<(T, T)> {
        match k {
            2 => Some((self.rho1_lo, self.rho1_hi)),
            3 => Some((self.rho2_lo, self.rho2_hi)),
            _ => None,
        }
    }
}

/// Log density of the inverse-gamma distribution with the given shape and scale.
pub fn inv_gamma_ln_pdf<T: Real>(x: T, shape: T, scale: T) -> T {
    if !(x > T::zero()) {
        return T::neg_infinity();
    }
    shape * scale.ln() - T::lit(ln_gamma(shape.as_f64())) - (shape + T::one()) * x.ln() - scale / x
}

fn uniform_ln_pdf<T: Real>(x: T, lo: T, hi: T) -> T {
    if x >= lo && x <= hi {
        -(hi - lo).ln()
    } else {
        T::neg_infinity()
    }
}

/// Joint log prior density; `-inf` outside the bandwidth supports.
pub fn log_prior<T: Real>(theta: &Theta<T>, priors: &PriorSpec<T>) -> T {
    inv_gamma_ln_pdf(theta.s2, priors.s2_shape, priors.s2_scale)
        + inv_gamma_ln_pdf(theta.tau2, priors.tau2_shape, priors.tau2_scale)
        + uniform_ln_pdf(theta.rho1, priors.rho1_lo, priors.rho1_hi)
        + uniform_ln_pdf(theta.rho2, priors.rho2_lo, priors.rho2_hi)
}

/// Covariate knots `X*` and time knots `S*` of a predictive process.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotSet<T: Real> {
    pub covariate_knots: CurveSet<T>,
    pub time_knots: Vec<T>,
    /// Rows of the training covariates the knots were drawn from, if any.
    pub source_indices: Option<Vec<usize>>,
}

impl<T: Real> KnotSet<T> {
    pub fn new(covariate_knots: CurveSet<T>, time_knots: Vec<T>) -> Result<Self> {
        if covariate_knots.n_curves() == 0 || time_knots.is_empty() {
            return Err(Error::InvalidParameter("knot sets must be non-empty".into()));
        }
        // reuse the grid validation for ordering and range
        TimeGrid::new(time_knots.clone())?;
        Ok(Self {
            covariate_knots,
            time_knots,
            source_indices: None,
        })
    }

    /// Knots equal to every training curve and every grid point.
    pub fn full(x: &CurveSet<T>) -> Self {
        Self {
            covariate_knots: x.clone(),
            time_knots: x.grid().points().to_vec(),
            source_indices: Some((0..x.n_curves()).collect()),
        }
    }

    pub fn m(&self) -> usize {
        self.covariate_knots.n_curves()
    }

    pub fn q(&self) -> usize {
        self.time_knots.len()
    }

    pub fn rank(&self) -> usize {
        self.m() * self.q()
    }

    /// Rebuilds a knot set from stored training-row indices.
    pub fn from_indices(x: &CurveSet<T>, indices: Vec<usize>, time_knots: Vec<T>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.n_curves()) {
            return Err(Error::InvalidParameter(format!(
                "knot index {bad} out of range for {} curves",
                x.n_curves()
            )));
        }
        let mut k = Self::new(x.select(&indices), time_knots)?;
        k.source_indices = Some(indices);
        Ok(k)
    }
}

/// `m` training curves drawn uniformly without replacement and `q`
/// equispaced times spanning the grid.
pub fn select_knots<T: Real, R: Rng + ?Sized>(
    x: &CurveSet<T>,
    m: usize,
    grid: &TimeGrid<T>,
    q: usize,
    rng: &mut R,
) -> Result<KnotSet<T>> {
    let n = x.n_curves();
    if m == 0 || m > n {
        return Err(Error::InvalidParameter(format!(
            "covariate knot count must be in 1..={n}, got {m}"
        )));
    }
    if q == 0 || q > grid.len() {
        return Err(Error::InvalidParameter(format!(
            "time knot count must be in 1..={}, got {q}",
            grid.len()
        )));
    }
    let indices = rand::seq::index::sample(rng, n, m).into_vec();
    let times = if q == 1 {
        vec![(grid.first() + grid.last()) * T::lit(0.5)]
    } else {
        linspace(grid.first(), grid.last(), q)
    };
    KnotSet::from_indices(x, indices, times)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovarianceKind {
    Full,
    PredProc,
    PredProcDiag,
}

impl CovarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::PredProc => "pp",
            Self::PredProcDiag => "ppdiag",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "pp" | "predproc" => Ok(Self::PredProc),
            "ppdiag" | "pp_diag" | "predprocdiag" => Ok(Self::PredProcDiag),
            other => Err(Error::Config(format!("unknown covariance kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec<T: Real> {
    pub kind: CovarianceKind,
    pub knots: Option<KnotSet<T>>,
}

impl<T: Real> CovarianceSpec<T> {
    pub fn full() -> Self {
        Self {
            kind: CovarianceKind::Full,
            knots: None,
        }
    }

    pub fn pred_proc(knots: KnotSet<T>) -> Self {
        Self {
            kind: CovarianceKind::PredProc,
            knots: Some(knots),
        }
    }

    pub fn pred_proc_diag(knots: KnotSet<T>) -> Self {
        Self {
            kind: CovarianceKind::PredProcDiag,
            knots: Some(knots),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.knots) {
            (CovarianceKind::Full, None) => Ok(()),
            (CovarianceKind::Full, Some(_)) => Err(Error::Config(
                "full covariance takes no knots".into(),
            )),
            (_, None) => Err(Error::Config(
                "predictive-process covariance requires knots".into(),
            )),
            (_, Some(_)) => Ok(()),
        }
    }
}

fn check_grid<T: Real>(x: &CurveSet<T>, grid: &TimeGrid<T>) -> Result<()> {
    if x.grid() != grid {
        return Err(Error::Dimension(
            "curves are not sampled on the supplied grid".into(),
        ));
    }
    Ok(())
}

/// `s2 A kron K + tau2 I` in structured form.
pub fn build_full_cov<T: Real>(theta: &Theta<T>, x: &CurveSet<T>, grid: &TimeGrid<T>) -> Result<KronFullCov<T>> {
    theta.validate()?;
    check_grid(x, grid)?;
    KronFullCov::new(
        covariate_gram(x, theta.rho1)?,
        time_gram(grid, theta.rho2)?,
        theta.s2,
        theta.tau2,
    )
}

/// Distances the predictive-process covariances are built from. Independent
/// of `theta`, so MCMC computes them once.
#[derive(Debug, Clone)]
pub struct KnotGeometry<T: Real> {
    /// `n x m` curve-to-knot distances.
    pub data_knot: DMatrix<T>,
    /// `m x m` knot-to-knot distances.
    pub knot_knot: DMatrix<T>,
    /// `T x q` grid-to-time-knot gaps.
    pub time_knot: DMatrix<T>,
    /// `q x q` time-knot gaps.
    pub knot_time_knot: DMatrix<T>,
}

impl<T: Real> KnotGeometry<T> {
    pub fn new(x: &CurveSet<T>, grid: &TimeGrid<T>, knots: &KnotSet<T>) -> Result<Self> {
        check_grid(x, grid)?;
        Ok(Self {
            data_knot: cross_distances(x, &knots.covariate_knots)?,
            knot_knot: pairwise_distances(&knots.covariate_knots),
            time_knot: time_distances(grid.points(), &knots.time_knots),
            knot_time_knot: time_distances(&knots.time_knots, &knots.time_knots),
        })
    }

    /// Cholesky factors of `A**` and `K**` (with Gram jitter).
    pub fn core(&self, theta: &Theta<T>) -> Result<CoreFactor<T>> {
        Ok(CoreFactor::Kron {
            left: gram_cholesky(&gram_from_distances(&self.knot_knot, theta.rho1)?)?,
            right: gram_cholesky(&gram_from_distances(&self.knot_time_knot, theta.rho2)?)?,
            scale: theta.s2,
        })
    }

    /// `s2 [A.* kron K.*][A** kron K**]^-1 [A*. kron K*.] + tau2 I`.
    pub fn pp_cov(&self, theta: &Theta<T>) -> Result<LowRankPlusDiag<T>> {
        theta.validate()?;
        let factor = LowRankFactor::Kron(
            gram_from_distances(&self.data_knot, theta.rho1)?,
            gram_from_distances(&self.time_knot, theta.rho2)?,
        );
        let dim = factor.nrows();
        LowRankPlusDiag::from_parts(factor, self.core(theta)?, DVector::from_element(dim, theta.tau2))
    }

    /// [`KnotGeometry::pp_cov`] with the diagonal restored to `s2 + tau2`.
    pub fn ppdiag_cov(&self, theta: &Theta<T>) -> Result<LowRankPlusDiag<T>> {
        let mut cov = self.pp_cov(theta)?;
        let approx = cov.low_rank_diagonal()?;
        cov.diag = diagonal_correction(theta, &approx)?;
        Ok(cov)
    }
}

/// `tau2 + diag(Sigma - Sigma~)` with round-off deficits clamped to zero.
pub(crate) fn diagonal_correction<T: Real>(theta: &Theta<T>, approx_diag: &DVector<T>) -> Result<DVector<T>> {
    let tol = T::lit(1e-10) * theta.s2.max(T::one());
    let mut out = DVector::zeros(approx_diag.len());
    for (i, &a) in approx_diag.iter().enumerate() {
        let deficit = theta.s2 - a;
        if deficit < -tol {
            return Err(Error::Numerical(format!(
                "predictive-process variance exceeds parent variance at entry {i} by {}",
                -deficit
            )));
        }
        out[i] = theta.tau2 + deficit.max(T::zero());
    }
    Ok(out)
}

/// Predictive-process covariance of the training responses.
pub fn build_pp_cov<T: Real>(
    theta: &Theta<T>,
    x: &CurveSet<T>,
    grid: &TimeGrid<T>,
    knots: &KnotSet<T>,
) -> Result<LowRankPlusDiag<T>> {
    KnotGeometry::new(x, grid, knots)?.pp_cov(theta)
}

/// Predictive-process covariance with the parent diagonal restored.
pub fn build_ppdiag_cov<T: Real>(
    theta: &Theta<T>,
    x: &CurveSet<T>,
    grid: &TimeGrid<T>,
    knots: &KnotSet<T>,
) -> Result<LowRankPlusDiag<T>> {
    KnotGeometry::new(x, grid, knots)?.ppdiag_cov(theta)
}

/// How the full-model likelihood is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FullPath {
    #[default]
    Kronecker,
    Dense,
}

/// Log marginal likelihood of one dataset under one covariance
/// specification, with all `theta`-independent distances precomputed.
#[derive(Debug, Clone)]
pub struct LikelihoodEvaluator<T: Real> {
    kind: CovarianceKind,
    path: FullPath,
    y: DVector<T>,
    y_mat: DMatrix<T>,
    curve_dist: DMatrix<T>,
    time_dist: DMatrix<T>,
    knots: Option<KnotGeometry<T>>,
}

impl<T: Real> LikelihoodEvaluator<T> {
    pub fn new(data: &FunctionalDataset<T>, spec: &CovarianceSpec<T>) -> Result<Self> {
        spec.validate()?;
        let knots = match &spec.knots {
            Some(k) => Some(KnotGeometry::new(&data.x, data.grid(), k)?),
            None => None,
        };
        let p = data.grid().points();
        Ok(Self {
            kind: spec.kind,
            path: FullPath::default(),
            y: data.y_vec(),
            y_mat: data.y_matrix().clone(),
            curve_dist: pairwise_distances(&data.x),
            time_dist: time_distances(p, p),
            knots,
        })
    }

    pub fn with_full_path(mut self, path: FullPath) -> Self {
        self.path = path;
        self
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn full_cov(&self, theta: &Theta<T>) -> Result<KronFullCov<T>> {
        KronFullCov::new(
            GramMatrix::from_matrix(gram_from_distances(&self.curve_dist, theta.rho1)?)?,
            GramMatrix::from_matrix(gram_from_distances(&self.time_dist, theta.rho2)?)?,
            theta.s2,
            theta.tau2,
        )
    }

    pub fn low_rank_cov(&self, theta: &Theta<T>) -> Result<LowRankPlusDiag<T>> {
        let geo = self
            .knots
            .as_ref()
            .ok_or_else(|| Error::Config("full covariance has no low-rank form".into()))?;
        match self.kind {
            CovarianceKind::PredProcDiag => geo.ppdiag_cov(theta),
            _ => geo.pp_cov(theta),
        }
    }

    /// `-1/2 [Y^T Sigma^-1 Y + log det Sigma + nT log 2 pi]`.
    pub fn evaluate(&self, theta: &Theta<T>) -> Result<T> {
        theta.validate()?;
        let (quad, logdet) = match (self.kind, self.path) {
            (CovarianceKind::Full, FullPath::Kronecker) => {
                let a = gram_from_distances(&self.curve_dist, theta.rho1)?;
                let k = gram_from_distances(&self.time_dist, theta.rho2)?;
                let eig = KronEigen::new(&a, &k)?;
                let alpha = eig.solve_matrix(theta.s2, theta.tau2, &self.y_mat)?;
                (alpha.dot(&self.y_mat), eig.logdet(theta.s2, theta.tau2)?)
            }
            (CovarianceKind::Full, FullPath::Dense) => {
                let sigma = self.full_cov(theta)?.materialize();
                (dense_solve(&sigma, &self.y)?.dot(&self.y), dense_logdet(&sigma)?)
            }
            _ => {
                let f = self.low_rank_cov(theta)?.factorize()?;
                (f.solve(&self.y)?.dot(&self.y), f.logdet())
            }
        };
        let ln_2pi = T::lit((2.0 * std::f64::consts::PI).ln());
        let value = -T::lit(0.5) * (quad + logdet + T::from_count(self.y.len()) * ln_2pi);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Numerical(format!("log likelihood is {value}")))
        }
    }
}

/// Gaussian log marginal likelihood of the responses.
pub fn log_marginal_likelihood<T: Real>(
    theta: &Theta<T>,
    data: &FunctionalDataset<T>,
    spec: &CovarianceSpec<T>,
) -> Result<T> {
    LikelihoodEvaluator::new(data, spec)?.evaluate(theta)
}

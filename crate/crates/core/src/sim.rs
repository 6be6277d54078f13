//! Data generators for the two simulation designs and the evaluation metrics.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::kernel::{covariate_gram, linspace, time_gram, CurveSet, TimeGrid};
use crate::linalg::gram_cholesky;
use crate::model::Theta;
use crate::predict::PredictionResult;
use crate::scalar::Real;

/// `5 B(t) + U[0, 5]` sampled on the grid.
pub fn gen_brownian_covariates<T: Real, R: Rng + ?Sized>(
    n: usize,
    grid: &TimeGrid<T>,
    rng: &mut R,
) -> Result<CurveSet<T>> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one curve".into()));
    }
    let p: Vec<f64> = grid.points().iter().map(|v| v.as_f64()).collect();
    let mut m = DMatrix::zeros(n, p.len());
    for i in 0..n {
        let start: f64 = rng.random_range(0.0..5.0);
        let z0: f64 = rng.sample(StandardNormal);
        let mut v = start + 5.0 * p[0].sqrt() * z0;
        m[(i, 0)] = T::lit(v);
        for j in 1..p.len() {
            let z: f64 = rng.sample(StandardNormal);
            v += 5.0 * (p[j] - p[j - 1]).sqrt() * z;
            m[(i, j)] = T::lit(v);
        }
    }
    CurveSet::new(m, grid.clone())
}

/// Draws `W ~ N(0, s2 A kron K)` on the covariates and adds `N(0, tau2)` noise.
pub fn gen_gp_data<T: Real, R: Rng + ?Sized>(
    theta: &Theta<T>,
    x: &CurveSet<T>,
    grid: &TimeGrid<T>,
    rng: &mut R,
) -> Result<FunctionalDataset<T>> {
    theta.validate()?;
    if x.grid() != grid {
        return Err(Error::Dimension("covariates are not on the supplied grid".into()));
    }
    let la = gram_cholesky(covariate_gram(x, theta.rho1)?.as_matrix())?.l();
    let lk = gram_cholesky(time_gram(grid, theta.rho2)?.as_matrix())?.l();
    let (n, t) = (x.n_curves(), grid.len());
    let z = DMatrix::from_fn(n, t, |_, _| T::lit(rng.sample(StandardNormal)));
    let w = la * z * lk.transpose() * theta.s2.sqrt();
    let sd = theta.tau2.sqrt();
    let y = DMatrix::from_fn(n, t, |i, j| w[(i, j)] + sd * T::lit(rng.sample(StandardNormal)));
    FunctionalDataset::new(x.clone(), CurveSet::new(y, grid.clone())?)?
        .with_w_true(CurveSet::new(w, grid.clone())?)
}

/// Noiseless `int_0^1 2 sin(2 pi (t - s)) x(s)^2 ds` by the trapezoidal rule on the grid.
pub fn regression_signal<T: Real>(x: &CurveSet<T>) -> DMatrix<T> {
    let grid = x.grid();
    let p = grid.points();
    let w = grid.weights();
    let kern = DMatrix::from_fn(p.len(), p.len(), |j, k| {
        w[k] * T::lit(2.0 * (2.0 * PI * (p[j] - p[k]).as_f64()).sin())
    });
    x.values().map(|v| v * v) * kern.transpose()
}

/// Responses from the integral operator above plus `N(0, tau2)` noise.
pub fn gen_regression_data<T: Real, R: Rng + ?Sized>(
    x: &CurveSet<T>,
    grid: &TimeGrid<T>,
    tau2: T,
    rng: &mut R,
) -> Result<FunctionalDataset<T>> {
    if x.grid() != grid {
        return Err(Error::Dimension("covariates are not on the supplied grid".into()));
    }
    if !(tau2 >= T::zero() && tau2.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau2 must be non-negative, got {tau2}")));
    }
    let w = regression_signal(x);
    let sd = tau2.sqrt();
    let y = w.map(|v| v + sd * T::lit(rng.sample(StandardNormal)));
    FunctionalDataset::new(x.clone(), CurveSet::new(y, grid.clone())?)?
        .with_w_true(CurveSet::new(w, grid.clone())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimKind {
    Gp,
    Freg,
}

impl SimKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gp => "gp",
            Self::Freg => "freg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(Self::Gp),
            "freg" => Ok(Self::Freg),
            other => Err(Error::Config(format!("unknown simulation kind '{other}'"))),
        }
    }
}

/// Settings of one simulated train/test pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub kind: SimKind,
    pub n_train: usize,
    pub n_test: usize,
    pub n_times: usize,
    pub theta: Theta<f64>,
    pub seed: u64,
}

impl SimConfig {
    pub fn gp(seed: u64) -> Self {
        Self {
            kind: SimKind::Gp,
            n_train: 30,
            n_test: 200,
            n_times: 40,
            theta: Theta { s2: 2.0, tau2: 0.05, rho1: 20.0, rho2: 0.2 },
            seed,
        }
    }

    /// Only `theta.tau2` is used by this design.
    pub fn freg(seed: u64) -> Self {
        Self {
            kind: SimKind::Freg,
            theta: Theta { tau2: 0.2, ..Self::gp(seed).theta },
            ..Self::gp(seed)
        }
    }
}

/// Training and test sets; for the GP design the latent process is drawn
/// jointly over all curves before splitting.
pub fn simulate(config: &SimConfig) -> Result<(FunctionalDataset<f64>, FunctionalDataset<f64>)> {
    if config.n_train == 0 || config.n_test == 0 || config.n_times == 0 {
        return Err(Error::InvalidParameter("simulation sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid = TimeGrid::new(linspace(0.0, 1.0, config.n_times))?;
    let x = gen_brownian_covariates(config.n_train + config.n_test, &grid, &mut rng)?;
    let all = match config.kind {
        SimKind::Gp => gen_gp_data(&config.theta, &x, &grid, &mut rng)?,
        SimKind::Freg => gen_regression_data(&x, &grid, config.theta.tau2, &mut rng)?,
    };
    let th = config.theta;
    let mut all = all
        .with_meta("kind", config.kind.name())
        .with_meta("seed", config.seed)
        .with_meta("tau2", th.tau2);
    if config.kind == SimKind::Gp {
        all = all
            .with_meta("s2", th.s2)
            .with_meta("rho1", th.rho1)
            .with_meta("rho2", th.rho2);
    }
    all.split_at(config.n_train)
}

fn check_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{:?} against {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_shape(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::InsufficientData("empty prediction".into()));
    }
    Ok((pred - truth).norm_squared() / pred.len() as f64)
}

/// Fraction of points inside their interval and the mean interval length.
pub fn coverage_and_length(result: &PredictionResult, truth: &DMatrix<f64>) -> Result<(f64, f64)> {
    check_shape(&result.lower, truth)?;
    check_shape(&result.upper, truth)?;
    if truth.is_empty() {
        return Err(Error::InsufficientData("empty prediction".into()));
    }
    let inside = truth
        .iter()
        .zip(result.lower.iter().zip(result.upper.iter()))
        .filter(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
        .count();
    let length = (&result.upper - &result.lower).sum() / truth.len() as f64;
    Ok((inside as f64 / truth.len() as f64, length))
}

/// Coverage of each test curve over its time points.
pub fn per_curve_coverage(result: &PredictionResult, truth: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_shape(&result.lower, truth)?;
    check_shape(&result.upper, truth)?;
    Ok((0..truth.nrows())
        .map(|i| {
            let hits = (0..truth.ncols())
                .filter(|&j| result.lower[(i, j)] <= truth[(i, j)] && truth[(i, j)] <= result.upper[(i, j)])
                .count();
            hits as f64 / truth.ncols() as f64
        })
        .collect())
}

/// Modified band depth with bands formed by pairs of reference curves.
pub fn band_depth(curve: &[f64], reference: &CurveSet<f64>) -> Result<f64> {
    let n = reference.n_curves();
    if n < 2 {
        return Err(Error::InsufficientData("band depth needs at least 2 reference curves".into()));
    }
    if curve.len() != reference.n_points() {
        return Err(Error::Dimension(format!(
            "curve has {} points, reference has {}",
            curve.len(),
            reference.n_points()
        )));
    }
    let r = reference.values();
    let t = curve.len();
    let mut total = 0usize;
    for i in 0..n {
        for k in i + 1..n {
            total += (0..t)
                .filter(|&j| {
                    let (a, b) = (r[(i, j)], r[(k, j)]);
                    a.min(b) <= curve[j] && curve[j] <= a.max(b)
                })
                .count();
        }
    }
    let pairs = n * (n - 1) / 2;
    Ok(total as f64 / (pairs * t) as f64)
}

/// Pearson correlation; `degenerate` is set (and the value 0) when either
/// input has zero variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} values against {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData("correlation needs at least 2 pairs".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(Correlation { value: 0.0, degenerate: true });
    }
    Ok(Correlation {
        value: sxy / (sxx * syy).sqrt(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthCoverage {
    pub depth: Vec<f64>,
    pub coverage: Vec<f64>,
    pub correlation: Correlation,
}

/// Depth of each test covariate within the training covariates, paired with
/// that curve's coverage.
pub fn depth_coverage_table(
    test_x: &CurveSet<f64>,
    train_x: &CurveSet<f64>,
    coverage: &[f64],
) -> Result<DepthCoverage> {
    if coverage.len() != test_x.n_curves() {
        return Err(Error::Dimension(format!(
            "{} coverages for {} test curves",
            coverage.len(),
            test_x.n_curves()
        )));
    }
    let depth = (0..test_x.n_curves())
        .map(|i| band_depth(&test_x.curve(i), train_x))
        .collect::<Result<Vec<_>>>()?;
    let correlation = pearson(&depth, coverage)?;
    Ok(DepthCoverage {
        depth,
        coverage: coverage.to_vec(),
        correlation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn brownian_start_and_increments() {
        let g = TimeGrid::new(vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let x = gen_brownian_covariates(100_000, &g, &mut rng(1)).unwrap();
        let v = x.values();
        assert!(v.column(0).iter().all(|&s| (0.0..=5.0).contains(&s)));
        for (a, b) in [(0, 1), (1, 3), (0, 3)] {
            let dt = g.points()[b] - g.points()[a];
            let diffs: Vec<f64> = (0..v.nrows()).map(|i| v[(i, b)] - v[(i, a)]).collect();
            let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
            assert!((var / (25.0 * dt) - 1.0).abs() < 0.05, "{var}");
        }
        let again = gen_brownian_covariates(3, &g, &mut rng(2)).unwrap();
        assert_eq!(again, gen_brownian_covariates(3, &g, &mut rng(2)).unwrap());
    }

    #[test]
    fn gp_degenerate_and_moments() {
        let g = TimeGrid::uniform(4).unwrap();
        let x = gen_brownian_covariates(2, &g, &mut rng(3)).unwrap();
        let th = Theta::new(1e-30, 1e-30, 1.0, 0.3).unwrap();
        let d = gen_gp_data(&th, &x, &g, &mut rng(4)).unwrap();
        assert!(d.y_matrix().amax() < 1e-12);

        // replicate the single-curve process many times
        let th = Theta::<f64>::new(2.0, 0.1, 1.0, 0.3).unwrap();
        let x1 = x.select(&[0]);
        let mut r = rng(5);
        let reps = 40_000;
        let mut cov01 = 0.0;
        let mut var_y = 0.0;
        for _ in 0..reps {
            let d = gen_gp_data(&th, &x1, &g, &mut r).unwrap();
            let w = d.w_true.as_ref().unwrap().values();
            cov01 += w[(0, 0)] * w[(0, 1)];
            var_y += d.y_matrix()[(0, 2)].powi(2);
        }
        let k01 = (-(1.0f64 / 3.0).powi(2) / 0.09).exp();
        assert!((cov01 / reps as f64 / (2.0 * k01) - 1.0).abs() < 0.05);
        assert!((var_y / reps as f64 / 2.1 - 1.0).abs() < 0.05);

        let a = gen_gp_data(&th, &x, &g, &mut rng(6)).unwrap();
        assert_eq!(a, gen_gp_data(&th, &x, &g, &mut rng(6)).unwrap());
    }

    #[test]
    fn regression_examples() {
        let g = TimeGrid::uniform(41).unwrap();
        let zero = CurveSet::new(DMatrix::zeros(1, 41), g.clone()).unwrap();
        assert!(regression_signal(&zero).amax() == 0.0);
        let c = CurveSet::new(DMatrix::from_element(1, 41, 1.7), g.clone()).unwrap();
        assert!(regression_signal(&c).amax() < 1e-12);

        // x(s) = s at t = 0: int 2 sin(-2 pi s) s^2 ds = 1/pi
        let fine = TimeGrid::uniform(2001).unwrap();
        let lin = CurveSet::new(DMatrix::from_fn(1, 2001, |_, j| j as f64 / 2000.0), fine).unwrap();
        assert_relative_eq!(regression_signal(&lin)[(0, 0)], 1.0 / PI, epsilon = 1e-4);

        // second-order convergence under grid refinement
        let err = |t: usize| {
            let g = TimeGrid::uniform(t).unwrap();
            let x = CurveSet::new(DMatrix::from_fn(1, t, |_, j| j as f64 / (t - 1) as f64), g).unwrap();
            (regression_signal(&x)[(0, 0)] - 1.0 / PI).abs()
        };
        let ratio = err(41) / err(81);
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn simulate_defaults() {
        let (tr, te) = simulate(&SimConfig::gp(1)).unwrap();
        assert_eq!((tr.n_curves(), te.n_curves(), tr.n_times()), (30, 200, 40));
        assert_eq!(tr.meta["rho1"], "20");
        let (tr2, _) = simulate(&SimConfig::gp(1)).unwrap();
        assert_eq!(tr, tr2);
        let (f, _) = simulate(&SimConfig::freg(1)).unwrap();
        assert_eq!(f.meta["tau2"], "0.2");
    }

    fn result(lower: DMatrix<f64>, upper: DMatrix<f64>) -> PredictionResult {
        let mean = (&lower + &upper) / 2.0;
        PredictionResult { var: mean.clone() * 0.0, mean, lower, upper, target: Default::default(), n_thetas: 1 }
    }

    #[test]
    fn metric_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(mse(&a.add_scalar(0.5), &a).unwrap(), 0.25);
        assert!(mse(&a, &DMatrix::zeros(1, 2)).is_err());

        let inf = result(DMatrix::from_element(2, 2, f64::NEG_INFINITY), DMatrix::from_element(2, 2, f64::INFINITY));
        assert_eq!(coverage_and_length(&inf, &a).unwrap().0, 1.0);
        let wrong = result(a.add_scalar(1.0), a.add_scalar(1.0));
        assert_eq!(coverage_and_length(&wrong, &a).unwrap(), (0.0, 0.0));
        let half = result(a.add_scalar(-1.0), a.add_scalar(1.0));
        assert_eq!(coverage_and_length(&half, &a).unwrap(), (1.0, 2.0));
        assert_eq!(per_curve_coverage(&half, &a).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn band_depth_examples() {
        let g = TimeGrid::uniform(3).unwrap();
        let r = CurveSet::new(DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0]), g.clone()).unwrap();
        assert_eq!(band_depth(&[1.0, 1.0, 1.0], &r).unwrap(), 1.0);
        assert_eq!(band_depth(&[3.0, 3.0, 3.0], &r).unwrap(), 0.0);
        assert!(band_depth(&[1.0; 3], &r.select(&[0])).is_err());

        let mut rr = rng(7);
        let r3 = CurveSet::new(DMatrix::from_fn(3, 3, |_, _| rr.random_range(-1.0..1.0)), g).unwrap();
        let c = [0.1, -0.2, 0.3];
        let v = r3.values();
        let mut hits = 0;
        for (i, k) in [(0, 1), (0, 2), (1, 2)] {
            for j in 0..3 {
                let lo = v[(i, j)].min(v[(k, j)]);
                let hi = v[(i, j)].max(v[(k, j)]);
                if lo <= c[j] && c[j] <= hi {
                    hits += 1;
                }
            }
        }
        assert_relative_eq!(band_depth(&c, &r3).unwrap(), hits as f64 / 9.0);
    }

    #[test]
    fn correlation_examples() {
        let c = pearson(&[0.1, 0.5, 0.9], &[1.0, 1.0, 1.0]).unwrap();
        assert!(c.degenerate && c.value == 0.0);
        let c = pearson(&[0.1, 0.5, 0.9], &[0.2, 0.6, 0.7]).unwrap();
        assert!(!c.degenerate && c.value > 0.0);
        let g = TimeGrid::uniform(2).unwrap();
        let x = CurveSet::new(DMatrix::zeros(2, 2), g).unwrap();
        assert!(depth_coverage_table(&x, &x, &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn band_depth_bounded_and_shift_invariant(
            vals in proptest::collection::vec(-40i32..40, 12),
            query in proptest::collection::vec(-50i32..50, 3),
            shift in proptest::collection::vec(-30i32..30, 3),
        ) {
            // quarter-integers keep every sum exact
            let q = |v: i32| v as f64 / 4.0;
            let g = TimeGrid::uniform(3).unwrap();
            let r = CurveSet::new(DMatrix::from_fn(4, 3, |i, j| q(vals[i * 3 + j])), g.clone()).unwrap();
            let c: Vec<f64> = query.iter().map(|&v| q(v)).collect();
            let d = band_depth(&c, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            let shifted = CurveSet::new(
                DMatrix::from_fn(4, 3, |i, j| q(vals[i * 3 + j]) + q(shift[j])),
                g,
            ).unwrap();
            let c2: Vec<f64> = c.iter().zip(&shift).map(|(a, &b)| a + q(b)).collect();
            prop_assert_eq!(d, band_depth(&c2, &shifted).unwrap());
        }

        #[test]
        fn coverage_depends_only_on_containment(
            truth in proptest::collection::vec(-3.0f64..3.0, 6),
            lo in proptest::collection::vec(-3.0f64..0.0, 6),
            width in proptest::collection::vec(0.0f64..3.0, 6),
        ) {
            let t = DMatrix::from_row_slice(2, 3, &truth);
            let l = DMatrix::from_row_slice(2, 3, &lo);
            let u = &l + DMatrix::from_row_slice(2, 3, &width);
            let (c1, _) = coverage_and_length(&result(l.clone(), u.clone()), &t).unwrap();
            let f = |m: &DMatrix<f64>| m.map(|v| v.powi(3) + 2.0 * v);
            let (c2, _) = coverage_and_length(&result(f(&l), f(&u)), &f(&t)).unwrap();
            prop_assert_eq!(c1, c2);
        }
    }
}

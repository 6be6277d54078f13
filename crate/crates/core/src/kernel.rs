//! Gaussian kernels, discretised L2 distances between sampled curves and the
//! Gram matrices built from them.
//!
//! Curves are rows of an `n x T` matrix sampled on a shared [`TimeGrid`].
//! Distances use the trapezoidal rule on that grid, so
//! `||x - y||^2 ~ sum_k w_k (x_k - y_k)^2` with the trapezoid weights `w_k`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Strictly increasing sample times inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    points: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(points: Vec<T>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter("time grid is empty".into()));
        }
        for (k, &p) in points.iter().enumerate() {
            if !p.is_finite() || p < T::zero() || p > T::one() {
                return Err(Error::InvalidParameter(format!(
                    "time point {k} = {p} lies outside [0, 1]"
                )));
            }
        }
        if let Some(k) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(format!(
                "time grid not strictly increasing at index {}",
                k + 1
            )));
        }
        let weights = trapezoid_weights(&points);
        Ok(Self { points, weights })
    }

    /// Equispaced grid of `len` points covering `[0, 1]` inclusive.
    pub fn uniform(len: usize) -> Result<Self> {
        match len {
            0 => Err(Error::InvalidParameter("time grid is empty".into())),
            1 => Self::new(vec![T::zero()]),
            _ => Self::new(linspace(T::zero(), T::one(), len)),
        }
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Trapezoidal quadrature weights for this grid.
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn first(&self) -> T {
        self.points[0]
    }

    pub fn last(&self) -> T {
        self.points[self.points.len() - 1]
    }
}

/// `len` equispaced values from `lo` to `hi` inclusive.
pub fn linspace<T: Real>(lo: T, hi: T, len: usize) -> Vec<T> {
    if len == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / T::from_count(len - 1);
    (0..len)
        .map(|k| {
            if k + 1 == len {
                hi
            } else {
                lo + step * T::from_count(k)
            }
        })
        .collect()
}

fn trapezoid_weights<T: Real>(points: &[T]) -> Vec<T> {
    let n = points.len();
    let half = T::lit(0.5);
    let mut w = vec![T::zero(); n];
    for k in 0..n.saturating_sub(1) {
        let h = (points[k + 1] - points[k]) * half;
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

/// `n` curves sampled on a common grid, one curve per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet<T: Real> {
    values: DMatrix<T>,
    grid: TimeGrid<T>,
}

impl<T: Real> CurveSet<T> {
    pub fn new(values: DMatrix<T>, grid: TimeGrid<T>) -> Result<Self> {
        if values.ncols() != grid.len() {
            return Err(Error::Dimension(format!(
                "curve matrix has {} columns but grid has {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::Data(format!(
                "non-finite curve value at row {r}, column {c}"
            )));
        }
        Ok(Self { values, grid })
    }

    pub fn from_rows(rows: &[Vec<T>], grid: TimeGrid<T>) -> Result<Self> {
        let t = grid.len();
        if let Some(i) = rows.iter().position(|r| r.len() != t) {
            return Err(Error::Dimension(format!(
                "curve {i} has {} values, grid has {t}",
                rows[i].len()
            )));
        }
        let values = DMatrix::from_fn(rows.len(), t, |i, j| rows[i][j]);
        Self::new(values, grid)
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn n_curves(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.values.ncols()
    }

    pub fn curve(&self, i: usize) -> Vec<T> {
        self.values.row(i).iter().copied().collect()
    }

    /// Curves at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let values = self.values.select_rows(indices.iter());
        Self {
            values,
            grid: self.grid.clone(),
        }
    }

    /// Curves at `range` (contiguous block of rows).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let values = self.values.rows(range.start, range.len()).into_owned();
        Self {
            values,
            grid: self.grid.clone(),
        }
    }

    pub fn into_values(self) -> DMatrix<T> {
        self.values
    }
}

/// Symmetric kernel matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T: Real>(DMatrix<T>);

impl<T: Real> GramMatrix<T> {
    /// Wraps a matrix after checking squareness and symmetry.
    pub fn from_matrix(m: DMatrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "Gram matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let tol = T::lit(1e-12);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(Error::InvalidParameter(format!(
                        "Gram matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.0
    }
}

/// `exp(-d^2 / rho^2)`.
pub fn gaussian_kernel<T: Real>(d: T, rho: T) -> Result<T> {
    check_bandwidth(rho)?;
    if !(d >= T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "distance must be nonnegative, got {d}"
        )));
    }
    Ok(kernel_unchecked(d, rho))
}

#[inline]
fn kernel_unchecked<T: Real>(d: T, rho: T) -> T {
    let r = d / rho;
    (-(r * r)).exp()
}

fn check_bandwidth<T: Real>(rho: T) -> Result<()> {
    if rho > T::zero() && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "bandwidth must be positive and finite, got {rho}"
        )))
    }
}

/// Trapezoidal approximation of `(int (x - y)^2 dt)^(1/2)` on `grid`.
pub fn l2_distance<T: Real>(x: &[T], y: &[T], grid: &TimeGrid<T>) -> Result<T> {
    if x.len() != grid.len() || y.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "curves of length {} and {} on a grid of {} points",
            x.len(),
            y.len(),
            grid.len()
        )));
    }
    let sq = x
        .iter()
        .zip(y)
        .zip(grid.weights())
        .fold(T::zero(), |acc, ((&a, &b), &w)| acc + w * (a - b) * (a - b));
    Ok(sq.sqrt())
}

fn row_distance<T: Real>(a: &DMatrix<T>, i: usize, b: &DMatrix<T>, j: usize, w: &[T]) -> T {
    let mut acc = T::zero();
    for (k, &wk) in w.iter().enumerate() {
        let d = a[(i, k)] - b[(j, k)];
        acc += wk * d * d;
    }
    acc.sqrt()
}

/// Symmetric `n x n` matrix of pairwise L2 distances with zero diagonal.
pub fn pairwise_distances<T: Real>(x: &CurveSet<T>) -> DMatrix<T> {
    let n = x.n_curves();
    let w = x.grid.weights();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = row_distance(&x.values, i, &x.values, j, w);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// `n x m` matrix of L2 distances between the curves of `x` and `y`.
pub fn cross_distances<T: Real>(x: &CurveSet<T>, y: &CurveSet<T>) -> Result<DMatrix<T>> {
    if x.grid.points() != y.grid.points() {
        return Err(Error::Dimension(
            "curve sets are sampled on different grids".into(),
        ));
    }
    let w = x.grid.weights();
    Ok(DMatrix::from_fn(x.n_curves(), y.n_curves(), |i, j| {
        row_distance(&x.values, i, &y.values, j, w)
    }))
}

/// `|s_i - t_j|` for every pair.
pub fn time_distances<T: Real>(s: &[T], t: &[T]) -> DMatrix<T> {
    DMatrix::from_fn(s.len(), t.len(), |i, j| (s[i] - t[j]).abs())
}

/// Applies the Gaussian kernel entrywise to a distance matrix.
pub fn gram_from_distances<T: Real>(d: &DMatrix<T>, rho: T) -> Result<DMatrix<T>> {
    check_bandwidth(rho)?;
    Ok(d.map(|v| kernel_unchecked(v, rho)))
}

/// `A = {a(||x_i - x_j||)}` with bandwidth `rho1`.
pub fn covariate_gram<T: Real>(x: &CurveSet<T>, rho1: T) -> Result<GramMatrix<T>> {
    if x.n_curves() == 0 {
        return Err(Error::InsufficientData("no curves".into()));
    }
    gram_from_distances(&pairwise_distances(x), rho1).map(GramMatrix)
}

/// `K = {k(|t_i - t_j|)}` with bandwidth `rho2`.
pub fn time_gram<T: Real>(grid: &TimeGrid<T>, rho2: T) -> Result<GramMatrix<T>> {
    let p = grid.points();
    gram_from_distances(&time_distances(p, p), rho2).map(GramMatrix)
}

/// Rectangular kernel matrix `{a(||x_i - x*_j||)}` between two curve sets.
pub fn cross_gram<T: Real>(x: &CurveSet<T>, xstar: &CurveSet<T>, rho1: T) -> Result<DMatrix<T>> {
    check_bandwidth(rho1)?;
    gram_from_distances(&cross_distances(x, xstar)?, rho1)
}

/// Rectangular kernel matrix `{k(|s_i - t_j|)}` between two sets of times.
pub fn cross_time_gram<T: Real>(s: &[T], t: &[T], rho2: T) -> Result<DMatrix<T>> {
    gram_from_distances(&time_distances(s, t), rho2)
}

/// Mean pairwise curve distance and mean pairwise time gap (pairs `i < j`).
pub fn heuristic_bandwidths<T: Real>(x: &CurveSet<T>, grid: &TimeGrid<T>) -> Result<(T, T)> {
    let n = x.n_curves();
    let t = grid.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 curves for bandwidth heuristics, got {n}"
        )));
    }
    if t < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 time points for bandwidth heuristics, got {t}"
        )));
    }
    if x.n_points() != t {
        return Err(Error::Dimension(format!(
            "curves have {} points but grid has {t}",
            x.n_points()
        )));
    }
    Ok((mean_upper(&pairwise_distances(x)), {
        let p = grid.points();
        mean_upper(&time_distances(p, p))
    }))
}

fn mean_upper<T: Real>(d: &DMatrix<T>) -> T {
    let n = d.nrows();
    let mut acc = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            acc += d[(i, j)];
        }
    }
    acc / T::from_count(n * (n - 1) / 2)
}

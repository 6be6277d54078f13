//! Structured solves and log-determinants for the two covariance shapes used
//! by the models:
//!
//! * separable `s2 * (A kron K) + tau2 * I`, handled through the symmetric
//!   eigendecompositions of `A` and `K` separately ([`KronEigen`]);
//! * low rank plus diagonal `P M^-1 P^T + diag(D)`, handled with the Woodbury
//!   identity and the determinant lemma on `r x r` matrices ([`SmwFactor`]).
//!
//! Dense Cholesky routines ([`dense_solve`], [`dense_logdet`]) are the ground
//! truth both structured paths are checked against.
//!
//! Vectors of length `n * T` are laid out curve-major: entry `i * T + j`
//! belongs to curve `i` at time `t_j`, matching `A.kronecker(&K)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::GramMatrix;
use crate::scalar::Real;

/// Absolute jitter ladder for kernel Gram matrices.
pub const GRAM_JITTER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Jitter ladder for dense covariance matrices, relative to `trace / dim`.
pub const DENSE_JITTER: [f64; 4] = [0.0, 1e-10, 1e-9, 1e-8];

fn add_diag<T: Real>(m: &DMatrix<T>, jitter: T) -> DMatrix<T> {
    let mut out = m.clone();
    if jitter != T::zero() {
        for i in 0..out.nrows() {
            out[(i, i)] += jitter;
        }
    }
    out
}

fn cholesky_ladder<T: Real>(m: &DMatrix<T>, ladder: &[f64], scale: T) -> Result<Cholesky<T, Dyn>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "Cholesky of non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    for &j in ladder {
        if let Some(c) = add_diag(m, T::lit(j) * scale).cholesky() {
            return Ok(c);
        }
    }
    Err(Error::Numerical(format!(
        "matrix of order {} not positive definite after jitter {:e}",
        m.nrows(),
        ladder.last().copied().unwrap_or(0.0) * scale.as_f64()
    )))
}

/// Cholesky factor of a kernel Gram matrix with at least `1e-10` added to
/// the diagonal.
pub fn gram_cholesky<T: Real>(m: &DMatrix<T>) -> Result<Cholesky<T, Dyn>> {
    cholesky_ladder(m, &GRAM_JITTER, T::one())
}

fn dense_cholesky<T: Real>(m: &DMatrix<T>) -> Result<Cholesky<T, Dyn>> {
    let n = m.nrows().max(1);
    let scale = (m.trace() / T::from_count(n)).abs().max(T::lit(f64::MIN_POSITIVE));
    cholesky_ladder(m, &DENSE_JITTER, scale)
}

/// Symmetric eigendecomposition with negative round-off eigenvalues clamped
/// to zero. Matrices more indefinite than `1e-8 * max(1, |lambda|_max)` are
/// rejected.
pub fn psd_eigen<T: Real>(m: &DMatrix<T>) -> Result<(DVector<T>, DMatrix<T>)> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition of non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let eps = T::default_epsilon();
    for &j in std::iter::once(&0.0).chain(GRAM_JITTER.iter()) {
        let shifted = add_diag(m, T::lit(j));
        if let Some(eig) = shifted.try_symmetric_eigen(eps, 0) {
            let top = eig.eigenvalues.iter().fold(T::one(), |a, &v| a.max(v.abs()));
            let min = eig.eigenvalues.iter().fold(T::infinity(), |a, &v| a.min(v));
            if !min.is_finite() {
                break;
            }
            if min < -T::lit(1e-8) * top {
                return Err(Error::Numerical(format!(
                    "matrix is not positive semidefinite (min eigenvalue {min})"
                )));
            }
            let vals = eig.eigenvalues.map(|v| v.max(T::zero()));
            return Ok((vals, eig.eigenvectors));
        }
    }
    Err(Error::Numerical(
        "symmetric eigendecomposition did not converge".into(),
    ))
}

/// Reshapes a curve-major vector of length `rows * cols` into a matrix.
pub fn unvec<T: Real>(v: &DVector<T>, rows: usize, cols: usize) -> DMatrix<T> {
    DMatrix::from_row_slice(rows, cols, v.as_slice())
}

/// Flattens a matrix row by row (curve-major).
pub fn vec_rows<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

/// `s2 * (A kron K) + tau2 * I`, kept as its two factors.
#[derive(Debug, Clone)]
pub struct KronFullCov<T: Real> {
    pub cov_gram: GramMatrix<T>,
    pub time_gram: GramMatrix<T>,
    pub s2: T,
    pub tau2: T,
}

impl<T: Real> KronFullCov<T> {
    pub fn new(cov_gram: GramMatrix<T>, time_gram: GramMatrix<T>, s2: T, tau2: T) -> Result<Self> {
        if !(s2 >= T::zero() && s2.is_finite()) || !(tau2 >= T::zero() && tau2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variances must be nonnegative and finite (s2 = {s2}, tau2 = {tau2})"
            )));
        }
        Ok(Self {
            cov_gram,
            time_gram,
            s2,
            tau2,
        })
    }

    pub fn n_curves(&self) -> usize {
        self.cov_gram.dim()
    }

    pub fn n_times(&self) -> usize {
        self.time_gram.dim()
    }

    pub fn dim(&self) -> usize {
        self.n_curves() * self.n_times()
    }

    /// The dense `nT x nT` matrix.
    pub fn materialize(&self) -> DMatrix<T> {
        let mut m = self.cov_gram.as_matrix().kronecker(self.time_gram.as_matrix()) * self.s2;
        for i in 0..m.nrows() {
            m[(i, i)] += self.tau2;
        }
        m
    }
}

/// Eigendecompositions of the two separable factors `A` and `K`.
///
/// Independent of `s2` and `tau2`, so one decomposition serves every variance
/// pair for fixed bandwidths.
#[derive(Debug, Clone)]
pub struct KronEigen<T: Real> {
    a_vals: DVector<T>,
    a_vecs: DMatrix<T>,
    k_vals: DVector<T>,
    k_vecs: DMatrix<T>,
}

impl<T: Real> KronEigen<T> {
    pub fn new(a: &DMatrix<T>, k: &DMatrix<T>) -> Result<Self> {
        let (a_vals, a_vecs) = psd_eigen(a)?;
        let (k_vals, k_vecs) = psd_eigen(k)?;
        Ok(Self {
            a_vals,
            a_vecs,
            k_vals,
            k_vecs,
        })
    }

    pub fn from_cov(c: &KronFullCov<T>) -> Result<Self> {
        Self::new(c.cov_gram.as_matrix(), c.time_gram.as_matrix())
    }

    pub fn n_curves(&self) -> usize {
        self.a_vals.len()
    }

    pub fn n_times(&self) -> usize {
        self.k_vals.len()
    }

    pub fn a_vals(&self) -> &DVector<T> {
        &self.a_vals
    }

    pub fn a_vecs(&self) -> &DMatrix<T> {
        &self.a_vecs
    }

    pub fn k_vals(&self) -> &DVector<T> {
        &self.k_vals
    }

    pub fn k_vecs(&self) -> &DMatrix<T> {
        &self.k_vecs
    }

    /// Applies `f(lambda_A_i, lambda_K_j)` in the joint eigenbasis to an
    /// `n x T` matrix: `U_A [(U_A^T Y U_K) .* F] U_K^T`.
    pub fn filter<F>(&self, y: &DMatrix<T>, f: F) -> DMatrix<T>
    where
        F: Fn(T, T) -> T,
    {
        let mut z = (self.a_vecs.transpose() * y) * &self.k_vecs;
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                z[(i, j)] *= f(self.a_vals[i], self.k_vals[j]);
            }
        }
        &self.a_vecs * z * self.k_vecs.transpose()
    }

    fn check_spectrum(&self, s2: T, tau2: T) -> Result<()> {
        let min = self.a_vals.min().max(T::zero()) * self.k_vals.min().max(T::zero()) * s2 + tau2;
        if min > T::zero() {
            Ok(())
        } else {
            Err(Error::Numerical(
                "separable covariance is singular (zero nugget and rank-deficient Grams)".into(),
            ))
        }
    }

    /// `(s2 A kron K + tau2 I)^-1 Y` with `Y` as an `n x T` matrix.
    pub fn solve_matrix(&self, s2: T, tau2: T, y: &DMatrix<T>) -> Result<DMatrix<T>> {
        if y.nrows() != self.n_curves() || y.ncols() != self.n_times() {
            return Err(Error::Dimension(format!(
                "right-hand side is {}x{}, covariance is over {}x{}",
                y.nrows(),
                y.ncols(),
                self.n_curves(),
                self.n_times()
            )));
        }
        self.check_spectrum(s2, tau2)?;
        Ok(self.filter(y, |la, lk| T::one() / (s2 * la * lk + tau2)))
    }

    pub fn solve(&self, s2: T, tau2: T, y: &DVector<T>) -> Result<DVector<T>> {
        let (n, t) = (self.n_curves(), self.n_times());
        if y.len() != n * t {
            return Err(Error::Dimension(format!(
                "vector of length {} for covariance of order {}",
                y.len(),
                n * t
            )));
        }
        Ok(vec_rows(&self.solve_matrix(s2, tau2, &unvec(y, n, t))?))
    }

    pub fn logdet(&self, s2: T, tau2: T) -> Result<T> {
        self.check_spectrum(s2, tau2)?;
        let mut acc = T::zero();
        for &la in self.a_vals.iter() {
            for &lk in self.k_vals.iter() {
                acc += (s2 * la * lk + tau2).ln();
            }
        }
        Ok(acc)
    }
}

/// `(s2 A kron K + tau2 I)^-1 y` via separate eigendecompositions.
pub fn kron_eig_solve<T: Real>(c: &KronFullCov<T>, y: &DVector<T>) -> Result<DVector<T>> {
    if y.len() != c.dim() {
        return Err(Error::Dimension(format!(
            "vector of length {} for covariance of order {}",
            y.len(),
            c.dim()
        )));
    }
    KronEigen::from_cov(c)?.solve(c.s2, c.tau2, y)
}

/// `log det(s2 A kron K + tau2 I) = sum_ij log(s2 lambda_i mu_j + tau2)`.
pub fn kron_eig_logdet<T: Real>(c: &KronFullCov<T>) -> Result<T> {
    KronEigen::from_cov(c)?.logdet(c.s2, c.tau2)
}

/// Dense solve through Cholesky.
pub fn dense_solve<T: Real>(sigma: &DMatrix<T>, y: &DVector<T>) -> Result<DVector<T>> {
    if sigma.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "matrix of order {} with vector of length {}",
            sigma.nrows(),
            y.len()
        )));
    }
    Ok(dense_cholesky(sigma)?.solve(y))
}

/// Dense log-determinant through Cholesky.
pub fn dense_logdet<T: Real>(sigma: &DMatrix<T>) -> Result<T> {
    let c = dense_cholesky(sigma)?;
    Ok(chol_logdet(&c))
}

fn chol_logdet<T: Real>(c: &Cholesky<T, Dyn>) -> T {
    c.l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, &d| acc + d.ln())
        * T::lit(2.0)
}

/// Low-rank factor `P`, either dense or a Kronecker product `P_l kron P_r`.
#[derive(Debug, Clone)]
pub enum LowRankFactor<T: Real> {
    Dense(DMatrix<T>),
    Kron(DMatrix<T>, DMatrix<T>),
}

impl<T: Real> LowRankFactor<T> {
    pub fn nrows(&self) -> usize {
        match self {
            Self::Dense(p) => p.nrows(),
            Self::Kron(l, r) => l.nrows() * r.nrows(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Self::Dense(p) => p.ncols(),
            Self::Kron(l, r) => l.ncols() * r.ncols(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        match self {
            Self::Dense(p) => p.clone(),
            Self::Kron(l, r) => l.kronecker(r),
        }
    }
}

/// Cholesky factor of the core matrix `M`; the Kronecker form represents
/// `M = (M_l kron M_r) / scale`.
#[derive(Debug, Clone)]
pub enum CoreFactor<T: Real> {
    Dense(Cholesky<T, Dyn>),
    Kron {
        left: Cholesky<T, Dyn>,
        right: Cholesky<T, Dyn>,
        scale: T,
    },
}

impl<T: Real> CoreFactor<T> {
    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(c) => c.l_dirty().nrows(),
            Self::Kron { left, right, .. } => left.l_dirty().nrows() * right.l_dirty().nrows(),
        }
    }

    /// Dense `M`.
    pub fn matrix(&self) -> DMatrix<T> {
        match self {
            Self::Dense(c) => {
                let l = c.l();
                &l * l.transpose()
            }
            Self::Kron { left, right, scale } => {
                let (l, r) = (left.l(), right.l());
                (&l * l.transpose()).kronecker(&(&r * r.transpose())) / *scale
            }
        }
    }
}

/// Whitened low-rank factor `U = P L^-T` with `M = L L^T`, so that
/// `P M^-1 P^T = U U^T`.
#[derive(Debug, Clone)]
pub enum Whitened<T: Real> {
    Dense(DMatrix<T>),
    Kron(DMatrix<T>, DMatrix<T>),
}

fn whiten<T: Real>(p: &DMatrix<T>, chol: &Cholesky<T, Dyn>) -> DMatrix<T> {
    let l = chol.l();
    let ut = l
        .solve_lower_triangular(&p.transpose())
        .expect("Cholesky factor has a positive diagonal");
    ut.transpose()
}

impl<T: Real> Whitened<T> {
    pub fn new(factor: &LowRankFactor<T>, core: &CoreFactor<T>) -> Result<Self> {
        if factor.rank() != core.dim() {
            return Err(Error::Dimension(format!(
                "factor of rank {} with core of order {}",
                factor.rank(),
                core.dim()
            )));
        }
        Ok(match (factor, core) {
            (LowRankFactor::Kron(pl, pr), CoreFactor::Kron { left, right, scale })
                if pl.ncols() == left.l_dirty().nrows() =>
            {
                Self::Kron(whiten(pl, left) * scale.sqrt(), whiten(pr, right))
            }
            (f, CoreFactor::Dense(c)) => Self::Dense(whiten(&f.to_dense(), c)),
            (f, core) => {
                let c = dense_cholesky(&core.matrix())?;
                Self::Dense(whiten(&f.to_dense(), &c))
            }
        })
    }

    pub fn nrows(&self) -> usize {
        match self {
            Self::Dense(u) => u.nrows(),
            Self::Kron(l, r) => l.nrows() * r.nrows(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Self::Dense(u) => u.ncols(),
            Self::Kron(l, r) => l.ncols() * r.ncols(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        match self {
            Self::Dense(u) => u.clone(),
            Self::Kron(l, r) => l.kronecker(r),
        }
    }

    /// `U v`.
    pub fn mul(&self, v: &DVector<T>) -> DVector<T> {
        match self {
            Self::Dense(u) => u * v,
            Self::Kron(l, r) => {
                let vm = unvec(v, l.ncols(), r.ncols());
                vec_rows(&(l * vm * r.transpose()))
            }
        }
    }

    /// `U^T y`.
    pub fn tr_mul(&self, y: &DVector<T>) -> DVector<T> {
        match self {
            Self::Dense(u) => u.tr_mul(y),
            Self::Kron(l, r) => {
                let ym = unvec(y, l.nrows(), r.nrows());
                vec_rows(&((l.transpose() * &ym) * r))
            }
        }
    }

    /// `diag(U U^T)`.
    pub fn row_sq_norms(&self) -> DVector<T> {
        match self {
            Self::Dense(u) => DVector::from_iterator(
                u.nrows(),
                u.row_iter().map(|row| row.norm_squared()),
            ),
            Self::Kron(l, r) => {
                let a: Vec<T> = l.row_iter().map(|row| row.norm_squared()).collect();
                let b: Vec<T> = r.row_iter().map(|row| row.norm_squared()).collect();
                DVector::from_iterator(
                    a.len() * b.len(),
                    a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)),
                )
            }
        }
    }

    /// `U^T diag(w) U`.
    pub fn weighted_gram(&self, w: &DVector<T>) -> DMatrix<T> {
        match self {
            Self::Dense(u) => {
                let mut scaled = u.clone();
                for (i, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= w[i];
                }
                u.transpose() * &scaled
            }
            Self::Kron(l, r) => {
                let (n, m) = l.shape();
                let (t, q) = r.shape();
                // Q[i, k m + k'] = l_ik l_ik', Z[i, l q + l'] = (r^T diag(w_i) r)_{l l'}
                let mut qm = DMatrix::zeros(n, m * m);
                let mut zm = DMatrix::zeros(n, q * q);
                let mut rw = r.clone();
                for i in 0..n {
                    for k in 0..m {
                        for k2 in 0..m {
                            qm[(i, k * m + k2)] = l[(i, k)] * l[(i, k2)];
                        }
                    }
                    for j in 0..t {
                        for c in 0..q {
                            rw[(j, c)] = r[(j, c)] * w[i * t + j];
                        }
                    }
                    let h = r.transpose() * &rw;
                    for a in 0..q {
                        for b in 0..q {
                            zm[(i, a * q + b)] = h[(a, b)];
                        }
                    }
                }
                let prod = qm.transpose() * &zm;
                DMatrix::from_fn(m * q, m * q, |row, col| {
                    let (k, a) = (row / q, row % q);
                    let (k2, b) = (col / q, col % q);
                    prod[(k * m + k2, a * q + b)]
                })
            }
        }
    }
}

/// `P M^-1 P^T + diag(D)` with `M` kept as a Cholesky factor.
#[derive(Debug, Clone)]
pub struct LowRankPlusDiag<T: Real> {
    pub factor: LowRankFactor<T>,
    pub core: CoreFactor<T>,
    pub diag: DVector<T>,
}

impl<T: Real> LowRankPlusDiag<T> {
    /// Dense factor `p` (`N x r`), core `m` (`r x r`, SPD) and diagonal `d`.
    pub fn new(p: DMatrix<T>, m: &DMatrix<T>, d: DVector<T>) -> Result<Self> {
        let core = CoreFactor::Dense(dense_cholesky(m)?);
        Self::from_parts(LowRankFactor::Dense(p), core, d)
    }

    pub fn from_parts(factor: LowRankFactor<T>, core: CoreFactor<T>, diag: DVector<T>) -> Result<Self> {
        if factor.nrows() != diag.len() {
            return Err(Error::Dimension(format!(
                "factor has {} rows, diagonal has {} entries",
                factor.nrows(),
                diag.len()
            )));
        }
        if factor.rank() != core.dim() {
            return Err(Error::Dimension(format!(
                "factor of rank {} with core of order {}",
                factor.rank(),
                core.dim()
            )));
        }
        if factor.rank() > factor.nrows() {
            return Err(Error::InvalidParameter(format!(
                "rank {} exceeds dimension {}",
                factor.rank(),
                factor.nrows()
            )));
        }
        Ok(Self { factor, core, diag })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn rank(&self) -> usize {
        self.factor.rank()
    }

    pub fn whitened(&self) -> Result<Whitened<T>> {
        Whitened::new(&self.factor, &self.core)
    }

    /// Diagonal of `P M^-1 P^T` (without `D`).
    pub fn low_rank_diagonal(&self) -> Result<DVector<T>> {
        Ok(self.whitened()?.row_sq_norms())
    }

    pub fn materialize(&self) -> Result<DMatrix<T>> {
        let u = self.whitened()?.to_dense();
        let mut m = &u * u.transpose();
        for i in 0..m.nrows() {
            m[(i, i)] += self.diag[i];
        }
        Ok(m)
    }

    pub fn factorize(&self) -> Result<SmwFactor<T>> {
        SmwFactor::new(self.whitened()?, self.diag.clone())
    }
}

#[derive(Debug, Clone)]
enum Inner<T: Real> {
    Dense(Cholesky<T, Dyn>),
    /// `I + c (G_l kron G_r)` with `G_l = V_l diag(lv) V_l^T`, `G_r` likewise.
    KronEig {
        lvecs: DMatrix<T>,
        lvals: DVector<T>,
        rvecs: DMatrix<T>,
        rvals: DVector<T>,
        c: T,
    },
}

/// Factorisation of `U U^T + diag(D)` through the capacitance matrix
/// `C = I + U^T D^-1 U`.
#[derive(Debug, Clone)]
pub struct SmwFactor<T: Real> {
    u: Whitened<T>,
    diag: DVector<T>,
    inner: Inner<T>,
}

impl<T: Real> SmwFactor<T> {
    pub fn new(u: Whitened<T>, diag: DVector<T>) -> Result<Self> {
        if u.nrows() != diag.len() {
            return Err(Error::Dimension(format!(
                "factor has {} rows, diagonal has {} entries",
                u.nrows(),
                diag.len()
            )));
        }
        if let Some(i) = diag.iter().position(|&d| !(d > T::zero() && d.is_finite())) {
            return Err(Error::Numerical(format!(
                "diagonal entry {i} is {} (must be positive)",
                diag[i]
            )));
        }
        let constant = diag.iter().all(|&d| d == diag[0]);
        let inner = match &u {
            Whitened::Kron(l, r) if constant => {
                let (lvals, lvecs) = psd_eigen(&(l.transpose() * l))?;
                let (rvals, rvecs) = psd_eigen(&(r.transpose() * r))?;
                Inner::KronEig {
                    lvecs,
                    lvals,
                    rvecs,
                    rvals,
                    c: T::one() / diag[0],
                }
            }
            _ => {
                let dinv = diag.map(|d| T::one() / d);
                let mut cap = u.weighted_gram(&dinv);
                for i in 0..cap.nrows() {
                    cap[(i, i)] += T::one();
                }
                let chol = cap.cholesky().ok_or_else(|| {
                    Error::Numerical("capacitance matrix not positive definite".into())
                })?;
                Inner::Dense(chol)
            }
        };
        Ok(Self { u, diag, inner })
    }

    pub fn whitened(&self) -> &Whitened<T> {
        &self.u
    }

    pub fn diag(&self) -> &DVector<T> {
        &self.diag
    }

    /// `C^-1 v`.
    pub fn inner_solve(&self, v: &DVector<T>) -> DVector<T> {
        match &self.inner {
            Inner::Dense(c) => c.solve(v),
            Inner::KronEig {
                lvecs,
                lvals,
                rvecs,
                rvals,
                c,
            } => {
                let vm = unvec(v, lvecs.nrows(), rvecs.nrows());
                let mut z = (lvecs.transpose() * &vm) * rvecs;
                for i in 0..z.nrows() {
                    for j in 0..z.ncols() {
                        z[(i, j)] /= T::one() + *c * lvals[i] * rvals[j];
                    }
                }
                vec_rows(&(lvecs * z * rvecs.transpose()))
            }
        }
    }

    fn inner_logdet(&self) -> T {
        match &self.inner {
            Inner::Dense(c) => chol_logdet(c),
            Inner::KronEig { lvals, rvals, c, .. } => {
                let mut acc = T::zero();
                for &a in lvals.iter() {
                    for &b in rvals.iter() {
                        acc += (T::one() + *c * a * b).ln();
                    }
                }
                acc
            }
        }
    }

    /// `(U U^T + D)^-1 y`.
    pub fn solve(&self, y: &DVector<T>) -> Result<DVector<T>> {
        if y.len() != self.diag.len() {
            return Err(Error::Dimension(format!(
                "vector of length {} for covariance of order {}",
                y.len(),
                self.diag.len()
            )));
        }
        let z = y.component_div(&self.diag);
        let s = self.inner_solve(&self.u.tr_mul(&z));
        Ok(z - self.u.mul(&s).component_div(&self.diag))
    }

    /// `C^-1 U^T D^-1 y`, the knot-space weights of the predictive mean.
    pub fn knot_weights(&self, y: &DVector<T>) -> DVector<T> {
        self.inner_solve(&self.u.tr_mul(&y.component_div(&self.diag)))
    }

    pub fn logdet(&self) -> T {
        self.diag.iter().fold(T::zero(), |acc, &d| acc + d.ln()) + self.inner_logdet()
    }

    /// `diag(V C^-1 V^T)` for rows `V` expressed in the same whitened basis.
    pub fn quad_diag(&self, v: &Whitened<T>) -> Result<DVector<T>> {
        if v.rank() != self.u.rank() {
            return Err(Error::Dimension(format!(
                "test factor of rank {} against rank {}",
                v.rank(),
                self.u.rank()
            )));
        }
        match (&self.inner, v) {
            (
                Inner::KronEig {
                    lvecs,
                    lvals,
                    rvecs,
                    rvals,
                    c,
                },
                Whitened::Kron(vl, vr),
            ) => {
                let b = (vl * lvecs).map(|x| x * x);
                let g = (vr * rvecs).map(|x| x * x);
                let f = DMatrix::from_fn(lvals.len(), rvals.len(), |i, j| {
                    T::one() / (T::one() + *c * lvals[i] * rvals[j])
                });
                Ok(vec_rows(&(b * f * g.transpose())))
            }
            (Inner::Dense(chol), Whitened::Kron(vl, vr)) => {
                let (m, q) = (vl.ncols(), vr.ncols());
                let cinv = chol.inverse();
                // R[k m + k', a q + b] = C^-1[k q + a, k' q + b]
                let rm = DMatrix::from_fn(m * m, q * q, |row, col| {
                    let (k, k2) = (row / m, row % m);
                    let (a, b) = (col / q, col % q);
                    cinv[(k * q + a, k2 * q + b)]
                });
                let qm = DMatrix::from_fn(vl.nrows(), m * m, |i, col| {
                    vl[(i, col / m)] * vl[(i, col % m)]
                });
                let hm = qm * rm;
                let t = vr.nrows();
                let mut out = DVector::zeros(vl.nrows() * t);
                for i in 0..vl.nrows() {
                    let h = DMatrix::from_fn(q, q, |a, b| hm[(i, a * q + b)]);
                    let gh = vr * h;
                    for j in 0..t {
                        out[i * t + j] = gh.row(j).dot(&vr.row(j));
                    }
                }
                Ok(out)
            }
            (Inner::Dense(chol), Whitened::Dense(vd)) => {
                let y = chol
                    .l()
                    .solve_lower_triangular(&vd.transpose())
                    .expect("Cholesky factor has a positive diagonal");
                Ok(DVector::from_iterator(
                    y.ncols(),
                    y.column_iter().map(|col| col.norm_squared()),
                ))
            }
            (
                Inner::KronEig {
                    lvecs,
                    lvals,
                    rvecs,
                    rvals,
                    c,
                },
                Whitened::Dense(vd),
            ) => {
                let z = vd * lvecs.kronecker(rvecs);
                let f: Vec<T> = lvals
                    .iter()
                    .flat_map(|&a| rvals.iter().map(move |&b| T::one() / (T::one() + *c * a * b)))
                    .collect();
                Ok(DVector::from_iterator(
                    z.nrows(),
                    z.row_iter()
                        .map(|row| row.iter().zip(&f).fold(T::zero(), |acc, (&x, &w)| acc + x * x * w)),
                ))
            }
        }
    }
}

/// `(diag(D) + P M^-1 P^T)^-1 y` using only `r x r` factorisations.
pub fn smw_solve<T: Real>(s: &LowRankPlusDiag<T>, y: &DVector<T>) -> Result<DVector<T>> {
    s.factorize()?.solve(y)
}

/// `log det(diag(D) + P M^-1 P^T)` by the matrix determinant lemma.
pub fn smw_logdet<T: Real>(s: &LowRankPlusDiag<T>) -> Result<T> {
    Ok(s.factorize()?.logdet())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn random_gram(n: usize, rng: &mut ChaCha8Rng) -> GramMatrix<f64> {
        let pts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        GramMatrix::from_matrix(DMatrix::from_fn(n, n, |i, j| {
            (-(pts[i] - pts[j]).powi(2)).exp()
        }))
        .unwrap()
    }

    #[test]
    fn dense_examples() {
        let y = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_relative_eq!(dense_solve(&eye, &y).unwrap(), y.clone(), epsilon = 1e-15);
        assert_relative_eq!(dense_logdet(&eye).unwrap(), 0.0, epsilon = 1e-15);
        let two = eye * 2.0;
        assert_relative_eq!(dense_solve(&two, &y).unwrap(), &y / 2.0, epsilon = 1e-15);
        let two_by_two = DMatrix::<f64>::identity(2, 2) * 2.0;
        assert_relative_eq!(dense_logdet(&two_by_two).unwrap(), 2.0 * 2f64.ln(), epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_spd(8, &mut rng);
        let y = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let x = dense_solve(&s, &y).unwrap();
        assert!((&s * &x - &y).norm() / y.norm() < 1e-10);

        let bad = -DMatrix::<f64>::identity(3, 3);
        assert!(matches!(dense_solve(&bad, &y.rows(0, 3).into_owned()), Err(Error::Numerical(_))));
        assert!(matches!(dense_solve(&s, &y.rows(0, 3).into_owned()), Err(Error::Dimension(_))));
    }

    #[test]
    fn kron_examples() {
        let y = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let c = KronFullCov::new(GramMatrix::identity(2), GramMatrix::identity(3), 1.5, 0.5).unwrap();
        assert_relative_eq!(kron_eig_solve(&c, &y).unwrap(), &y / 2.0, epsilon = 1e-14);
        let c = KronFullCov::new(GramMatrix::identity(2), GramMatrix::identity(3), 1.0, 1.0).unwrap();
        assert_relative_eq!(kron_eig_logdet(&c).unwrap(), 6.0 * 2f64.ln(), epsilon = 1e-13);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = KronFullCov::new(random_gram(2, &mut rng), random_gram(5, &mut rng), 0.0, 0.05).unwrap();
        let y = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        assert_relative_eq!(kron_eig_solve(&c, &y).unwrap(), &y / 0.05, epsilon = 1e-10);
        assert_relative_eq!(kron_eig_logdet(&c).unwrap(), 10.0 * 0.05f64.ln(), epsilon = 1e-12);

        let bad = DVector::zeros(7);
        assert!(matches!(kron_eig_solve(&c, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn kron_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = KronFullCov::new(random_gram(4, &mut rng), random_gram(5, &mut rng), 1.7, 0.3).unwrap();
        let y = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        let dense = c.materialize();
        assert!(rel_err(&kron_eig_solve(&c, &y).unwrap(), &dense_solve(&dense, &y).unwrap()) < 1e-8);
        assert_relative_eq!(kron_eig_logdet(&c).unwrap(), dense_logdet(&dense).unwrap(), epsilon = 1e-8);
    }

    #[test]
    fn smw_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // P = 0
        let d = DVector::from_fn(5, |_, _| rng.random_range(0.5..2.0));
        let y = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let s = LowRankPlusDiag::new(DMatrix::zeros(5, 2), &random_spd(2, &mut rng), d.clone()).unwrap();
        assert_relative_eq!(smw_solve(&s, &y).unwrap(), y.component_div(&d), epsilon = 1e-14);
        let s = LowRankPlusDiag::new(DMatrix::zeros(5, 2), &DMatrix::identity(2, 2), DVector::from_element(5, 0.7)).unwrap();
        assert_relative_eq!(smw_logdet(&s).unwrap(), 5.0 * 0.7f64.ln(), epsilon = 1e-14);

        // rank one: [[2, 1], [1, 2]]
        let s = LowRankPlusDiag::new(
            DMatrix::from_element(2, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let y = DVector::from_vec(vec![1.0, 0.0]);
        // dense 2x2 inverse: 1/3 [[2, -1], [-1, 2]]
        assert_relative_eq!(smw_solve(&s, &y).unwrap(), DVector::from_vec(vec![2.0 / 3.0, -1.0 / 3.0]), epsilon = 1e-14);
        assert_relative_eq!(smw_logdet(&s).unwrap(), 3f64.ln(), epsilon = 1e-14);

        let bad = LowRankPlusDiag::new(DMatrix::zeros(2, 1), &DMatrix::identity(1, 1), DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!(matches!(smw_solve(&bad, &y), Err(Error::Numerical(_))));
    }

    #[test]
    fn smw_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = DMatrix::from_fn(40, 6, |_, _| rng.random_range(-1.0..1.0));
        let m = random_spd(6, &mut rng);
        let d = DVector::from_fn(40, |_, _| rng.random_range(0.1..1.0));
        let s = LowRankPlusDiag::new(p.clone(), &m, d.clone()).unwrap();
        let dense = &p * m.clone().try_inverse().unwrap() * p.transpose() + DMatrix::from_diagonal(&d);
        let y = DVector::from_fn(40, |_, _| rng.random_range(-1.0..1.0));
        assert!(rel_err(&smw_solve(&s, &y).unwrap(), &dense_solve(&dense, &y).unwrap()) < 1e-8);
        assert_relative_eq!(smw_logdet(&s).unwrap(), dense_logdet(&dense).unwrap(), epsilon = 1e-8);
        assert_relative_eq!(s.materialize().unwrap(), dense, epsilon = 1e-10);
    }

    #[test]
    fn kron_factor_paths_agree_with_dense_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pl = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let pr = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let (ml, mr) = (random_spd(3, &mut rng), random_spd(2, &mut rng));
        let core = CoreFactor::Kron {
            left: ml.clone().cholesky().unwrap(),
            right: mr.clone().cholesky().unwrap(),
            scale: 1.8,
        };
        let y = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        let dense_m = ml.kronecker(&mr) / 1.8;
        let dense_p = pl.kronecker(&pr);
        for d in [DVector::from_element(20, 0.4), DVector::from_fn(20, |_, _| rng.random_range(0.2..1.0))] {
            let s = LowRankPlusDiag::from_parts(LowRankFactor::Kron(pl.clone(), pr.clone()), core.clone(), d.clone()).unwrap();
            let reference = LowRankPlusDiag::new(dense_p.clone(), &dense_m, d.clone()).unwrap();
            let sigma = reference.materialize().unwrap();
            assert_relative_eq!(s.materialize().unwrap(), sigma.clone(), epsilon = 1e-10);
            assert!(rel_err(&smw_solve(&s, &y).unwrap(), &dense_solve(&sigma, &y).unwrap()) < 1e-8);
            assert_relative_eq!(smw_logdet(&s).unwrap(), dense_logdet(&sigma).unwrap(), epsilon = 1e-8);

            // quadratic forms against both Kron and dense test rows
            let f = s.factorize().unwrap();
            let vl = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let vr = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let kron_rows = Whitened::Kron(vl.clone(), vr.clone());
            let dense_rows = Whitened::Dense(vl.kronecker(&vr));
            let u = f.whitened().to_dense();
            let mut cap = u.transpose() * DMatrix::from_diagonal(&d.map(|x| 1.0 / x)) * &u;
            cap += DMatrix::identity(6, 6);
            let cinv = cap.try_inverse().unwrap();
            let v = vl.kronecker(&vr);
            let expected = (&v * cinv * v.transpose()).diagonal();
            assert_relative_eq!(f.quad_diag(&kron_rows).unwrap(), expected.clone(), epsilon = 1e-10);
            assert_relative_eq!(f.quad_diag(&dense_rows).unwrap(), expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn weighted_gram_kron_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let l = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let r = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(20, |_, _| rng.random_range(0.0..2.0));
        let dense = l.kronecker(&r);
        let expected = dense.transpose() * DMatrix::from_diagonal(&w) * &dense;
        let got = Whitened::Kron(l.clone(), r.clone()).weighted_gram(&w);
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        let v = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        assert_relative_eq!(Whitened::Kron(l.clone(), r.clone()).mul(&v), &dense * &v, epsilon = 1e-12);
        assert_relative_eq!(Whitened::Kron(l.clone(), r.clone()).tr_mul(&w), dense.tr_mul(&w), epsilon = 1e-12);
        assert_relative_eq!(
            Whitened::Kron(l, r).row_sq_norms(),
            DVector::from_iterator(20, dense.row_iter().map(|x| x.norm_squared())),
            epsilon = 1e-12
        );
    }

    #[test]
    fn eigen_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(psd_eigen(&m), Err(Error::Numerical(_))));
    }
}

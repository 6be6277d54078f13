//! Componentwise random-walk Metropolis on the log scale.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{log_prior, CovarianceKind, LikelihoodEvaluator, PriorSpec, Theta, PARAM_NAMES};
use crate::scalar::Real;

/// Unnormalised log posterior over `Theta`.
pub trait LogTarget<T: Real>: Sync {
    fn priors(&self) -> &PriorSpec<T>;

    fn log_likelihood(&self, theta: &Theta<T>) -> Result<T>;

    fn log_posterior(&self, theta: &Theta<T>) -> Result<T> {
        let lp = log_prior(theta, self.priors());
        if lp == T::neg_infinity() {
            return Ok(lp);
        }
        Ok(lp + self.log_likelihood(theta)?)
    }

    fn kind(&self) -> Option<CovarianceKind> {
        None
    }
}

/// Prior times Gaussian marginal likelihood.
pub struct Posterior<T: Real> {
    pub evaluator: LikelihoodEvaluator<T>,
    pub priors: PriorSpec<T>,
}

impl<T: Real> LogTarget<T> for Posterior<T> {
    fn priors(&self) -> &PriorSpec<T> {
        &self.priors
    }

    fn log_likelihood(&self, theta: &Theta<T>) -> Result<T> {
        self.evaluator.evaluate(theta)
    }

    fn kind(&self) -> Option<CovarianceKind> {
        Some(self.evaluator.kind())
    }
}

/// Prior with the likelihood replaced by a constant.
pub struct PriorOnly<T: Real> {
    pub priors: PriorSpec<T>,
    pub constant: T,
}

impl<T: Real> LogTarget<T> for PriorOnly<T> {
    fn priors(&self) -> &PriorSpec<T> {
        &self.priors
    }

    fn log_likelihood(&self, _theta: &Theta<T>) -> Result<T> {
        Ok(self.constant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainState<T> {
    pub theta: Theta<T>,
    pub log_post: T,
    pub step: usize,
}

impl<T: Real> ChainState<T> {
    pub fn new<L: LogTarget<T> + ?Sized>(theta: Theta<T>, target: &L) -> Result<Self> {
        theta.validate()?;
        Ok(Self {
            theta,
            log_post: target.log_posterior(&theta)?,
            step: 0,
        })
    }
}

/// Standard deviations of the log-scale proposals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalScales(pub [f64; 4]);

impl Default for ProposalScales {
    fn default() -> Self {
        Self([0.3; 4])
    }
}

/// Outcome of one sweep over the four parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepReport {
    pub accepted: [bool; 4],
    pub failures: usize,
}

/// One componentwise sweep. A proposal whose likelihood cannot be evaluated
/// is rejected and counted in `failures`.
pub fn rw_metropolis_step<T: Real, L: LogTarget<T> + ?Sized, R: Rng + ?Sized>(
    state: &ChainState<T>,
    target: &L,
    scales: &ProposalScales,
    rng: &mut R,
) -> (ChainState<T>, StepReport) {
    let mut cur = *state;
    let mut report = StepReport::default();
    for k in 0..4 {
        let z: f64 = rng.sample(StandardNormal);
        let old = cur.theta.get(k);
        let log_old = old.ln();
        let log_new = log_old + T::lit(scales.0[k] * z);
        let proposal = cur.theta.with(k, log_new.exp());
        let u: f64 = rng.random();
        let lp = match target.log_posterior(&proposal) {
            Ok(v) if v.partial_cmp(&v).is_some() => v,
            _ => {
                report.failures += 1;
                continue;
            }
        };
        if lp == T::neg_infinity() {
            continue;
        }
        let log_alpha = lp - cur.log_post + (log_new - log_old);
        if u.ln() < log_alpha.as_f64() {
            cur.theta = proposal;
            cur.log_post = lp;
            report.accepted[k] = true;
        }
    }
    cur.step += 1;
    (cur, report)
}

pub const ADAPT_WINDOW: usize = 50;

/// Scale adjustment from one window of acceptance flags.
pub fn adapt_proposals(window: &[[bool; 4]], scales: &ProposalScales) -> ProposalScales {
    if window.is_empty() {
        return *scales;
    }
    let mut out = *scales;
    for k in 0..4 {
        let rate = window.iter().filter(|a| a[k]).count() as f64 / window.len() as f64;
        if rate > 0.45 {
            out.0[k] *= 0.1f64.exp();
        } else if rate < 0.15 {
            out.0[k] *= (-0.1f64).exp();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub chains: usize,
    pub iters: usize,
    pub burnin: usize,
    pub seed: u64,
    pub initial_scales: ProposalScales,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iters: 5000,
            burnin: 1000,
            seed: 1,
            initial_scales: ProposalScales::default(),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::InvalidParameter("at least one chain is required".into()));
        }
        if self.iters <= self.burnin {
            return Err(Error::InvalidParameter(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iters, self.burnin
            )));
        }
        if self.initial_scales.0.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("proposal scales must be positive".into()));
        }
        Ok(())
    }
}

/// Full record of one chain, burn-in included.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace<T> {
    pub thetas: Vec<Theta<T>>,
    pub log_post: Vec<T>,
    pub accepted: Vec<[bool; 4]>,
    pub failures: usize,
    pub final_scales: ProposalScales,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples<T> {
    pub traces: Vec<ChainTrace<T>>,
    pub burnin: usize,
    pub kind: Option<CovarianceKind>,
    pub meta: BTreeMap<String, String>,
}

impl<T: Real> PosteriorSamples<T> {
    pub fn n_chains(&self) -> usize {
        self.traces.len()
    }

    /// Retained draws of chain `c`.
    pub fn draws(&self, c: usize) -> &[Theta<T>] {
        let t = &self.traces[c].thetas;
        &t[self.burnin.min(t.len())..]
    }

    pub fn pooled(&self) -> Vec<Theta<T>> {
        (0..self.n_chains()).flat_map(|c| self.draws(c).to_vec()).collect()
    }

    /// Every `step`-th pooled draw, chosen so at most `max` remain.
    pub fn thinned(&self, max: usize) -> Vec<Theta<T>> {
        let all = self.pooled();
        if max == 0 || all.len() <= max {
            return all;
        }
        let step = all.len().div_ceil(max);
        all.into_iter().step_by(step).collect()
    }

    /// Post-burn-in acceptance rate per chain and parameter.
    pub fn acceptance_rates(&self) -> Vec<[f64; 4]> {
        self.traces
            .iter()
            .map(|tr| {
                let kept = &tr.accepted[self.burnin.min(tr.accepted.len())..];
                let mut r = [0.0; 4];
                if !kept.is_empty() {
                    for (k, v) in r.iter_mut().enumerate() {
                        *v = kept.iter().filter(|a| a[k]).count() as f64 / kept.len() as f64;
                    }
                }
                r
            })
            .collect()
    }
}

fn prior_draw<T: Real, R: Rng + ?Sized>(priors: &PriorSpec<T>, rng: &mut R) -> Theta<T> {
    let ig = |shape: T, scale: T, rng: &mut R| -> T {
        let g = Gamma::new(shape.as_f64(), 1.0).expect("validated shape");
        let v: f64 = g.sample(rng);
        T::lit(scale.as_f64() / v.max(f64::MIN_POSITIVE))
    };
    let s2 = ig(priors.s2_shape, priors.s2_scale, rng);
    let tau2 = ig(priors.tau2_shape, priors.tau2_scale, rng);
    let uni = |lo: T, hi: T, rng: &mut R| -> T {
        let u: f64 = rng.random();
        let v = T::lit(lo.as_f64() + u * (hi - lo).as_f64());
        v.max(lo).min(hi)
    };
    let rho1 = uni(priors.rho1_lo, priors.rho1_hi, rng);
    let rho2 = uni(priors.rho2_lo, priors.rho2_hi, rng);
    Theta::from_array([s2, tau2, rho1, rho2])
}

const START_ATTEMPTS: usize = 200;

fn run_chain<T: Real, L: LogTarget<T> + ?Sized>(
    target: &L,
    config: &McmcConfig,
    chain: u64,
) -> Result<ChainTrace<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain);
    let mut state = None;
    for _ in 0..START_ATTEMPTS {
        let theta = prior_draw(target.priors(), &mut rng);
        if let Ok(s) = ChainState::new(theta, target) {
            if s.log_post.is_finite() {
                state = Some(s);
                break;
            }
        }
    }
    let mut state = state.ok_or_else(|| {
        Error::Numerical(format!(
            "chain {chain}: no finite starting point in {START_ATTEMPTS} prior draws"
        ))
    })?;
    let mut scales = config.initial_scales;
    let mut trace = ChainTrace {
        thetas: Vec::with_capacity(config.iters),
        log_post: Vec::with_capacity(config.iters),
        accepted: Vec::with_capacity(config.iters),
        failures: 0,
        final_scales: scales,
    };
    for it in 0..config.iters {
        let (next, report) = rw_metropolis_step(&state, target, &scales, &mut rng);
        state = next;
        trace.thetas.push(state.theta);
        trace.log_post.push(state.log_post);
        trace.accepted.push(report.accepted);
        trace.failures += report.failures;
        if it < config.burnin && (it + 1) % ADAPT_WINDOW == 0 {
            scales = adapt_proposals(&trace.accepted[it + 1 - ADAPT_WINDOW..], &scales);
        }
    }
    trace.final_scales = scales;
    Ok(trace)
}

/// Independent chains from overdispersed prior starts; chain `c` uses
/// stream `c` of a generator seeded with `config.seed`. Chains that fail
/// are dropped and reported in `meta`; if every chain fails the run fails.
pub fn run_chains<T: Real, L: LogTarget<T> + ?Sized>(
    target: &L,
    config: &McmcConfig,
) -> Result<PosteriorSamples<T>> {
    config.validate()?;
    target.priors().validate()?;
    let results: Vec<Result<ChainTrace<T>>> = (0..config.chains as u64)
        .into_par_iter()
        .map(|c| run_chain(target, config, c))
        .collect();
    let mut traces = Vec::new();
    let mut errors = Vec::new();
    for (c, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => traces.push(t),
            Err(e) => errors.push(format!("chain {c}: {e}")),
        }
    }
    if traces.is_empty() {
        return Err(Error::Run(errors.join("; ")));
    }
    let mut meta = BTreeMap::new();
    meta.insert("chains".into(), config.chains.to_string());
    meta.insert("iters".into(), config.iters.to_string());
    meta.insert("burnin".into(), config.burnin.to_string());
    meta.insert("seed".into(), config.seed.to_string());
    if !errors.is_empty() {
        meta.insert("failed_chains".into(), errors.join("; "));
    }
    Ok(PosteriorSamples {
        traces,
        burnin: config.burnin,
        kind: target.kind(),
        meta,
    })
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSummary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ParamSummary {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Summary of one set of scalar draws with an equal-tailed interval.
pub fn summarize(values: &[f64], level: f64) -> Result<ParamSummary> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no draws to summarise".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must be in (0, 1), got {level}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok(ParamSummary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        lower: quantile_sorted(&sorted, a),
        upper: quantile_sorted(&sorted, 1.0 - a),
    })
}

/// Pooled mean and equal-tailed interval for `s2, tau2, rho1, rho2`.
pub fn posterior_summary<T: Real>(samples: &PosteriorSamples<T>, level: f64) -> Result<[ParamSummary; 4]> {
    let pooled = samples.pooled();
    if pooled.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} retained draws; at least 2 required",
            pooled.len()
        )));
    }
    let mut out = [ParamSummary { mean: 0.0, lower: 0.0, upper: 0.0 }; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let v: Vec<f64> = pooled.iter().map(|t| t.get(k).as_f64()).collect();
        *slot = summarize(&v, level)?;
    }
    Ok(out)
}

/// Split-chain potential scale reduction of scalar chains; `inf` when the
/// within-chain variance vanishes.
pub fn split_rhat_scalar(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InsufficientData("split R-hat needs at least 2 chains".into()));
    }
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    if len < 4 {
        return Err(Error::InsufficientData(format!(
            "split R-hat needs at least 4 draws per chain, got {len}"
        )));
    }
    let half = len / 2;
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        parts.push(&c[..half]);
        parts.push(&c[len - half..len]);
    }
    let n = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / n).collect();
    let within: f64 = parts
        .iter()
        .zip(&means)
        .map(|(p, &m)| p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / parts.len() as f64;
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let between = n * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() as f64 - 1.0);
    if within <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    Ok((var_plus / within).sqrt())
}

pub fn split_rhat<T: Real>(samples: &PosteriorSamples<T>) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let chains: Vec<Vec<f64>> = (0..samples.n_chains())
            .map(|c| samples.draws(c).iter().map(|t| t.get(k).as_f64()).collect())
            .collect();
        *slot = split_rhat_scalar(&chains)?;
    }
    Ok(out)
}

pub fn param_name(k: usize) -> &'static str {
    PARAM_NAMES[k]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::distribution::{ContinuousCDF, InverseGamma, Normal};

    fn priors() -> PriorSpec<f64> {
        PriorSpec::weakly_informative(1.0, 0.2)
    }

    fn prior_only() -> PriorOnly<f64> {
        PriorOnly { priors: priors(), constant: -3.0 }
    }

    /// KS distance between samples and a reference CDF.
    fn ks(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn prior_recovery() {
        let cfg = McmcConfig {
            chains: 4,
            iters: 26_000,
            burnin: 1000,
            seed: 11,
            initial_scales: ProposalScales([1.0; 4]),
        };
        let s = run_chains(&prior_only(), &cfg).unwrap();
        let pooled = s.thinned(10_000);
        assert_eq!(pooled.len(), 10_000);
        let p = priors();
        let ig1 = InverseGamma::new(2.0, 3.0).unwrap();
        let ig2 = InverseGamma::new(2.0, 0.1).unwrap();
        let col = |k: usize| pooled.iter().map(|t| t.get(k)).collect::<Vec<_>>();
        assert!(ks(&col(0), |x| ig1.cdf(x)) < 0.05);
        assert!(ks(&col(1), |x| ig2.cdf(x)) < 0.05);
        let uni = |lo: f64, hi: f64| move |x: f64| ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        assert!(ks(&col(2), uni(p.rho1_lo, p.rho1_hi)) < 0.05);
        assert!(ks(&col(3), uni(p.rho2_lo, p.rho2_hi)) < 0.05);
    }

    #[test]
    fn tiny_scale_accepts_almost_always() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = prior_only();
        let mut st = ChainState::new(Theta::new(2.0, 0.1, 1.0, 0.2).unwrap(), &target).unwrap();
        let start = st.theta;
        let scales = ProposalScales([1e-9; 4]);
        let mut acc = 0;
        for _ in 0..200 {
            let (next, rep) = rw_metropolis_step(&st, &target, &scales, &mut rng);
            acc += rep.accepted.iter().filter(|&&a| a).count();
            st = next;
        }
        assert!(acc >= 795);
        assert_relative_eq!(st.theta.s2, start.s2, epsilon = 1e-5);
    }

    #[test]
    fn out_of_support_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = prior_only();
        // rho1 at its upper bound; huge proposal steps almost always leave the support
        let st = ChainState::new(Theta::new(2.0, 0.1, 10.0, 0.2).unwrap(), &target).unwrap();
        let scales = ProposalScales([1e-12, 1e-12, 50.0, 1e-12]);
        for _ in 0..100 {
            let (next, rep) = rw_metropolis_step(&st, &target, &scales, &mut rng);
            if rep.accepted[2] {
                let r = next.theta.rho1;
                assert!((0.1..=10.0).contains(&r));
            }
        }
    }

    #[test]
    fn acceptance_invariant_to_constant_shift() {
        let a = PriorOnly { priors: priors(), constant: 0.0 };
        let b = PriorOnly { priors: priors(), constant: 1e3 };
        let th = Theta::new(2.0, 0.1, 1.0, 0.2).unwrap();
        let (mut sa, mut sb) = (ChainState::new(th, &a).unwrap(), ChainState::new(th, &b).unwrap());
        let mut ra = ChaCha8Rng::seed_from_u64(4);
        let mut rb = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let (na, pa) = rw_metropolis_step(&sa, &a, &ProposalScales::default(), &mut ra);
            let (nb, pb) = rw_metropolis_step(&sb, &b, &ProposalScales::default(), &mut rb);
            assert_eq!(pa, pb);
            assert_eq!(na.theta, nb.theta);
            sa = na;
            sb = nb;
        }
    }

    #[test]
    fn adaptation_examples() {
        let s = ProposalScales([1.0; 4]);
        let all = vec![[true; 4]; 50];
        assert_relative_eq!(adapt_proposals(&all, &s).0[0], 0.1f64.exp());
        let none = vec![[false; 4]; 50];
        assert_relative_eq!(adapt_proposals(&none, &s).0[1], (-0.1f64).exp());
        let mut mixed = vec![[false; 4]; 50];
        for row in mixed.iter_mut().take(15) {
            *row = [true; 4];
        }
        assert_eq!(adapt_proposals(&mixed, &s), s);
    }

    #[test]
    fn run_chains_examples() {
        let cfg = McmcConfig { chains: 1, iters: 11, burnin: 10, seed: 5, ..Default::default() };
        let s = run_chains(&prior_only(), &cfg).unwrap();
        assert_eq!(s.draws(0).len(), 1);

        let cfg = McmcConfig { chains: 3, iters: 300, burnin: 100, seed: 6, ..Default::default() };
        let a = run_chains(&prior_only(), &cfg).unwrap();
        let b = run_chains(&prior_only(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.traces[0].thetas, a.traces[1].thetas);
        for c in 0..3 {
            assert_eq!(a.draws(c).len(), 200);
        }
        assert!(run_chains(&prior_only(), &McmcConfig { iters: 5, burnin: 5, ..cfg }).is_err());
    }

    struct Failing(PriorSpec<f64>);

    impl LogTarget<f64> for Failing {
        fn priors(&self) -> &PriorSpec<f64> {
            &self.0
        }

        fn log_likelihood(&self, _: &Theta<f64>) -> Result<f64> {
            Err(Error::Numerical("always".into()))
        }
    }

    #[test]
    fn all_chains_failing_is_run_error() {
        let cfg = McmcConfig { chains: 2, iters: 5, burnin: 1, ..Default::default() };
        assert!(matches!(run_chains(&Failing(priors()), &cfg), Err(Error::Run(_))));
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[1.0, 2.0, 3.0], 0.95).unwrap();
        assert_relative_eq!(s.mean, 2.0);
        let c = summarize(&[4.5; 7], 0.95).unwrap();
        assert_eq!((c.lower, c.upper), (4.5, 4.5));
        assert!(summarize(&[], 0.95).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let s = summarize(&z, 0.95).unwrap();
        let q = Normal::standard().inverse_cdf(0.975);
        assert!((s.lower + q).abs() < 0.05 && (s.upper - q).abs() < 0.05);
    }

    #[test]
    fn rhat_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let iid: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2000).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let r = split_rhat_scalar(&iid).unwrap();
        assert!((1.0 - 1e-3..=1.05).contains(&r), "{r}");

        let disjoint = vec![
            (0..100).map(|i| (i % 2) as f64 * 1e-3).collect::<Vec<_>>(),
            (0..100).map(|i| 10.0 + (i % 2) as f64 * 1e-3).collect(),
        ];
        assert!(split_rhat_scalar(&disjoint).unwrap() > 5.0);
        assert_eq!(split_rhat_scalar(&[vec![1.0; 10], vec![1.0; 10]]).unwrap(), f64::INFINITY);
        assert!(split_rhat_scalar(&[vec![1.0; 3], vec![1.0; 3]]).is_err());
    }
}

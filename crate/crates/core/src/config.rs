//! Run settings from a `key=value` file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::read_kv;
use crate::mcmc::McmcConfig;
use crate::model::{CovarianceKind, PriorSpec};

pub const KEYS: &[&str] = &[
    "kind", "m", "q", "chains", "iters", "burnin", "seed", "method", "target", "max_thetas",
    "draws_per_theta", "level", "data", "test", "fit", "out", "s2_shape", "s2_scale", "tau2_shape",
    "tau2_scale", "rho1_lo", "rho1_hi", "rho2_lo", "rho2_hi",
];

/// Raw settings: file values first, flags on top.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layered {
    values: BTreeMap<String, String>,
}

impl Layered {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let values = match path {
            Some(p) => read_kv(p)?,
            None => BTreeMap::new(),
        };
        if let Some(k) = values.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key '{k}'")));
        }
        Ok(Self { values })
    }

    pub fn set<V: ToString>(&mut self, key: &str, flag: Option<V>) {
        if let Some(v) = flag {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.values
            .get(key)
            .map(|s| {
                s.parse::<V>()
                    .map_err(|_| Error::Config(format!("bad value '{s}' for '{key}'")))
            })
            .transpose()
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get::<PathBuf>(key)?
            .ok_or_else(|| Error::Config(format!("missing required setting '{key}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: CovarianceKind,
    pub m: usize,
    pub q: usize,
    pub mcmc: McmcConfig,
    pub prior_overrides: BTreeMap<String, f64>,
}

impl RunConfig {
    pub fn from_layered(l: &Layered) -> Result<Self> {
        let kind = match l.get::<String>("kind")? {
            Some(k) => CovarianceKind::parse(&k).map_err(|e| Error::Config(e.to_string()))?,
            None => CovarianceKind::Full,
        };
        let d = McmcConfig::default();
        let mcmc = McmcConfig {
            chains: l.get_or("chains", d.chains)?,
            iters: l.get_or("iters", d.iters)?,
            burnin: l.get_or("burnin", d.burnin)?,
            seed: l.get_or("seed", d.seed)?,
            ..d
        };
        mcmc.validate().map_err(|e| Error::Config(e.to_string()))?;
        let mut prior_overrides = BTreeMap::new();
        for key in &KEYS[16..] {
            if let Some(v) = l.get::<f64>(key)? {
                prior_overrides.insert(key.to_string(), v);
            }
        }
        let cfg = Self { kind, m: l.get_or("m", 30)?, q: l.get_or("q", 10)?, mcmc, prior_overrides };
        if cfg.kind != CovarianceKind::Full && (cfg.m == 0 || cfg.q == 0) {
            return Err(Error::Config("knot counts m and q must be positive".into()));
        }
        Ok(cfg)
    }

    /// Data-driven priors with any configured fields replaced.
    pub fn priors(&self, base: PriorSpec<f64>) -> Result<PriorSpec<f64>> {
        let mut p = base;
        for (k, &v) in &self.prior_overrides {
            let slot = match k.as_str() {
                "s2_shape" => &mut p.s2_shape,
                "s2_scale" => &mut p.s2_scale,
                "tau2_shape" => &mut p.tau2_shape,
                "tau2_scale" => &mut p.tau2_scale,
                "rho1_lo" => &mut p.rho1_lo,
                "rho1_hi" => &mut p.rho1_hi,
                "rho2_lo" => &mut p.rho2_lo,
                _ => &mut p.rho2_hi,
            };
            *slot = v;
        }
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "kind = pp\nm=12\nchains=2\nrho1_hi=50\n").unwrap();
        let mut l = Layered::from_file(Some(&p)).unwrap();
        l.set("m", Some(7usize));
        l.set::<usize>("q", None);
        let cfg = RunConfig::from_layered(&l).unwrap();
        assert_eq!(cfg.kind, CovarianceKind::PredProc);
        assert_eq!((cfg.m, cfg.q, cfg.mcmc.chains), (7, 10, 2));
        let base = PriorSpec::weakly_informative(1.0, 1.0);
        assert_eq!(cfg.priors(base).unwrap().rho1_hi, 50.0);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "chainz=2\n").unwrap();
        assert!(matches!(Layered::from_file(Some(&p)), Err(Error::Config(_))));
        let mut l = Layered::default();
        l.set("iters", Some("many"));
        assert!(matches!(RunConfig::from_layered(&l), Err(Error::Config(_))));
        let mut l = Layered::default();
        l.set("burnin", Some(9000));
        assert!(matches!(RunConfig::from_layered(&l), Err(Error::Config(_))));
    }
}

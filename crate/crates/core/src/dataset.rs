use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{CurveSet, TimeGrid};
use crate::linalg::vec_rows;
use crate::scalar::Real;

/// Paired covariate and response curves on one time grid.
///
/// `w_true` carries the noiseless responses when they are known
/// (simulations); `labels` names the curves (weather stations).
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset<T: Real> {
    pub x: CurveSet<T>,
    pub y: CurveSet<T>,
    pub w_true: Option<CurveSet<T>>,
    pub labels: Option<Vec<String>>,
    pub meta: BTreeMap<String, String>,
}

impl<T: Real> FunctionalDataset<T> {
    pub fn new(x: CurveSet<T>, y: CurveSet<T>) -> Result<Self> {
        check_pair(&x, &y, "responses")?;
        Ok(Self {
            x,
            y,
            w_true: None,
            labels: None,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_w_true(mut self, w: CurveSet<T>) -> Result<Self> {
        check_pair(&self.x, &w, "latent values")?;
        self.w_true = Some(w);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_curves() {
            return Err(Error::Dimension(format!(
                "{} labels for {} curves",
                labels.len(),
                self.n_curves()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        self.x.grid()
    }

    pub fn n_curves(&self) -> usize {
        self.x.n_curves()
    }

    pub fn n_times(&self) -> usize {
        self.x.n_points()
    }

    /// Responses stacked curve-major: `(y_1(t_1), ..., y_1(t_T), y_2(t_1), ...)`.
    pub fn y_vec(&self) -> DVector<T> {
        vec_rows(self.y.values())
    }

    pub fn y_matrix(&self) -> &DMatrix<T> {
        self.y.values()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select(indices),
            y: self.y.select(indices),
            w_true: self.w_true.as_ref().map(|w| w.select(indices)),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
            meta: self.meta.clone(),
        }
    }

    /// First `n` curves and the remainder.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n > self.n_curves() {
            return Err(Error::InvalidParameter(format!(
                "cannot split {} curves at {n}",
                self.n_curves()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.n_curves()).collect();
        Ok((self.select(&head), self.select(&tail)))
    }

    /// Partition by label: curves named in `names` go to the second set.
    pub fn split_by_labels(&self, names: &[String]) -> Result<(Self, Self)> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("dataset has no curve labels".into()))?;
        for name in names {
            if !labels.iter().any(|l| l == name) {
                return Err(Error::Config(format!("unknown curve label '{name}'")));
            }
        }
        let (held, kept): (Vec<usize>, Vec<usize>) =
            (0..labels.len()).partition(|&i| names.iter().any(|n| n == &labels[i]));
        Ok((self.select(&kept), self.select(&held)))
    }
}

fn check_pair<T: Real>(x: &CurveSet<T>, y: &CurveSet<T>, what: &str) -> Result<()> {
    if x.grid() != y.grid() {
        return Err(Error::Dimension(format!(
            "covariates and {what} use different grids"
        )));
    }
    if x.n_curves() != y.n_curves() {
        return Err(Error::Dimension(format!(
            "{} covariate curves but {} {what}",
            x.n_curves(),
            y.n_curves()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> FunctionalDataset<f64> {
        let g = TimeGrid::uniform(3).unwrap();
        let x = CurveSet::new(DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64), g.clone()).unwrap();
        let y = CurveSet::new(DMatrix::from_fn(4, 3, |i, j| (i * 10 + j) as f64), g).unwrap();
        FunctionalDataset::new(x, y)
            .unwrap()
            .with_labels(vec!["a".into(), "b".into(), "c".into(), "d".into()])
            .unwrap()
    }

    #[test]
    fn y_vec_is_curve_major() {
        let d = toy();
        assert_eq!(d.y_vec().as_slice()[..4], [0.0, 1.0, 2.0, 10.0]);
    }

    #[test]
    fn splits() {
        let d = toy();
        let (a, b) = d.split_at(1).unwrap();
        assert_eq!((a.n_curves(), b.n_curves()), (1, 3));
        let (kept, held) = d.split_by_labels(&["b".into(), "d".into()]).unwrap();
        assert_eq!(kept.labels.unwrap(), vec!["a", "c"]);
        assert_eq!(held.y.values()[(0, 0)], 10.0);
        assert!(d.split_by_labels(&["zz".into()]).is_err());
    }

    #[test]
    fn rejects_mismatched_sizes() {
        let g = TimeGrid::<f64>::uniform(3).unwrap();
        let x = CurveSet::new(DMatrix::zeros(2, 3), g.clone()).unwrap();
        let y = CurveSet::new(DMatrix::zeros(3, 3), g).unwrap();
        assert!(matches!(FunctionalDataset::new(x, y), Err(Error::Dimension(_))));
    }
}

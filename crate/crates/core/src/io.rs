//! CSV and key-value file formats. Floats are written with 17 significant
//! digits so every value round-trips exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::kernel::{CurveSet, TimeGrid};
use crate::mcmc::{ChainTrace, ParamSummary, PosteriorSamples, ProposalScales};
use crate::model::{CovarianceKind, KnotSet, PriorSpec, Theta, PARAM_NAMES};
use crate::predict::{PredictTarget, PredictionResult};
use crate::sim::DepthCoverage;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `contents` next to `path` and renames it into place.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Data(format!("csv buffer: {e}")))
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    atomic_write(path, &csv_bytes(header, rows)?)
}

/// Header and raw string cells of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            },
            _ => Error::Csv(e),
        })?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Parses cell `(row, col)`; positions in messages are 1-based data rows
/// and 1-based columns.
pub fn parse_cell(path: &Path, row: usize, col: usize, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            row: row + 1,
            col: col + 1,
            msg: format!("'{s}' is not a finite number"),
        })
}

pub fn read_matrix(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let (header, rows) = read_csv(path)?;
    let ncol = header.len();
    let mut m = DMatrix::zeros(rows.len(), ncol);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncol {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                col: r.len().min(ncol) + 1,
                msg: format!("expected {ncol} fields, found {}", r.len()),
            });
        }
        for (j, s) in r.iter().enumerate() {
            m[(i, j)] = parse_cell(path, i, j, s)?;
        }
    }
    Ok((header, m))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<String>> {
    m.row_iter()
        .map(|r| r.iter().map(|&v| fmt_f64(v)).collect())
        .collect()
}

fn time_header(t: usize) -> Vec<String> {
    (1..=t).map(|j| format!("t{j}")).collect()
}

pub fn write_kv(path: &Path, map: &BTreeMap<String, String>) -> Result<()> {
    let mut s = String::new();
    for (k, v) in map {
        s.push_str(&format!("{k}={v}\n"));
    }
    atomic_write(path, s.as_bytes())
}

/// `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            col: 1,
            msg: format!("expected key=value, found '{line}'"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, path)
}

/// `grid.csv`, `X.csv`, `Y.csv`, optional `W.csv` and `labels.csv`, and `meta.txt`.
pub fn write_dataset(dir: &Path, data: &FunctionalDataset<f64>) -> Result<()> {
    let t = data.n_times();
    write_csv(
        &dir.join("grid.csv"),
        &["t".to_string()],
        data.grid().points().iter().map(|&v| vec![fmt_f64(v)]),
    )?;
    write_csv(&dir.join("X.csv"), &time_header(t), matrix_rows(data.x.values()))?;
    write_csv(&dir.join("Y.csv"), &time_header(t), matrix_rows(data.y.values()))?;
    if let Some(w) = &data.w_true {
        write_csv(&dir.join("W.csv"), &time_header(t), matrix_rows(w.values()))?;
    }
    if let Some(labels) = &data.labels {
        write_csv(
            &dir.join("labels.csv"),
            &["label".to_string()],
            labels.iter().map(|l| vec![l.clone()]),
        )?;
    }
    write_kv(&dir.join("meta.txt"), &data.meta)
}

fn read_curves(path: &Path, grid: &TimeGrid<f64>) -> Result<CurveSet<f64>> {
    let (_, m) = read_matrix(path)?;
    if m.ncols() != grid.len() {
        return Err(Error::Dimension(format!(
            "{} has {} columns but the grid has {} points",
            path.display(),
            m.ncols(),
            grid.len()
        )));
    }
    CurveSet::new(m, grid.clone())
}

pub fn read_dataset(dir: &Path) -> Result<FunctionalDataset<f64>> {
    let grid_path = dir.join("grid.csv");
    let (_, g) = read_matrix(&grid_path)?;
    if g.ncols() != 1 {
        return Err(Error::Parse {
            path: grid_path,
            row: 0,
            col: 2,
            msg: "grid file must have a single column".into(),
        });
    }
    let grid = TimeGrid::new(g.column(0).iter().copied().collect())?;
    let x = read_curves(&dir.join("X.csv"), &grid)?;
    let y = read_curves(&dir.join("Y.csv"), &grid)?;
    let mut data = FunctionalDataset::new(x, y)?;
    let w_path = dir.join("W.csv");
    if w_path.exists() {
        data = data.with_w_true(read_curves(&w_path, &grid)?)?;
    }
    let l_path = dir.join("labels.csv");
    if l_path.exists() {
        let (_, rows) = read_csv(&l_path)?;
        data = data.with_labels(rows.into_iter().map(|r| r.join(",")).collect())?;
    }
    let m_path = dir.join("meta.txt");
    if m_path.exists() {
        data.meta = read_kv(&m_path)?;
    }
    Ok(data)
}

/// Everything needed to reuse a fit: chain traces plus `fit.txt`.
pub fn write_fit(
    dir: &Path,
    samples: &PosteriorSamples<f64>,
    knots: Option<&KnotSet<f64>>,
    priors: &PriorSpec<f64>,
) -> Result<()> {
    let mut header: Vec<String> = vec!["iter".into()];
    header.extend(PARAM_NAMES.iter().map(|s| s.to_string()));
    header.push("log_post".into());
    header.extend(PARAM_NAMES.iter().map(|s| format!("acc_{s}")));
    for (c, tr) in samples.traces.iter().enumerate() {
        let rows = (0..tr.thetas.len()).map(|i| {
            let mut r = vec![(i + 1).to_string()];
            r.extend(tr.thetas[i].to_array().iter().map(|&v| fmt_f64(v)));
            r.push(fmt_f64(tr.log_post[i]));
            r.extend(tr.accepted[i].iter().map(|&a| u8::from(a).to_string()));
            r
        });
        write_csv(&dir.join(format!("chain_{c}.csv")), &header, rows)?;
    }
    let mut meta = samples.meta.clone();
    meta.insert("n_chains".into(), samples.n_chains().to_string());
    meta.insert("burnin".into(), samples.burnin.to_string());
    if let Some(kind) = samples.kind {
        meta.insert("kind".into(), kind.name().into());
    }
    for (c, tr) in samples.traces.iter().enumerate() {
        meta.insert(format!("failures_{c}"), tr.failures.to_string());
        meta.insert(format!("scales_{c}"), join_f64(&tr.final_scales.0));
    }
    let p = priors;
    meta.insert(
        "priors".into(),
        join_f64(&[
            p.s2_shape, p.s2_scale, p.tau2_shape, p.tau2_scale, p.rho1_lo, p.rho1_hi, p.rho2_lo, p.rho2_hi,
        ]),
    );
    if let Some(k) = knots {
        let idx = k
            .source_indices
            .as_ref()
            .ok_or_else(|| Error::Config("knots must come from training rows to be saved".into()))?;
        meta.insert(
            "knot_indices".into(),
            idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "),
        );
        meta.insert("time_knots".into(), join_f64(&k.time_knots));
    }
    write_kv(&dir.join("fit.txt"), &meta)
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ")
}

fn split_f64(s: &str, path: &Path, key: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: 0,
                col: 0,
                msg: format!("bad number '{t}' in {key}"),
            })
        })
        .collect()
}

/// A fit read back from disk.
#[derive(Debug, Clone)]
pub struct StoredFit {
    pub samples: PosteriorSamples<f64>,
    pub knots: Option<KnotSet<f64>>,
    pub priors: PriorSpec<f64>,
}

pub fn read_fit(dir: &Path, train: &FunctionalDataset<f64>) -> Result<StoredFit> {
    let meta_path = dir.join("fit.txt");
    let meta = read_kv(&meta_path)?;
    let get = |k: &str| {
        meta.get(k).ok_or_else(|| Error::Parse {
            path: meta_path.clone(),
            row: 0,
            col: 0,
            msg: format!("missing key '{k}'"),
        })
    };
    let bad = |k: &str| Error::Parse {
        path: meta_path.clone(),
        row: 0,
        col: 0,
        msg: format!("bad value for '{k}'"),
    };
    let n_chains: usize = get("n_chains")?.parse().map_err(|_| bad("n_chains"))?;
    let burnin: usize = get("burnin")?.parse().map_err(|_| bad("burnin"))?;
    let kind = meta.get("kind").map(|k| CovarianceKind::parse(k)).transpose()?;
    let mut traces = Vec::with_capacity(n_chains);
    for c in 0..n_chains {
        let path = dir.join(format!("chain_{c}.csv"));
        let (header, m) = read_matrix(&path)?;
        if header.len() != 10 {
            return Err(Error::Parse {
                path,
                row: 0,
                col: header.len(),
                msg: "trace files have 10 columns".into(),
            });
        }
        let thetas = (0..m.nrows())
            .map(|i| Theta::from_array([m[(i, 1)], m[(i, 2)], m[(i, 3)], m[(i, 4)]]))
            .collect();
        let scales = match meta.get(&format!("scales_{c}")) {
            Some(s) => {
                let v = split_f64(s, &meta_path, "scales")?;
                ProposalScales(v.try_into().map_err(|_| bad("scales"))?)
            }
            None => ProposalScales::default(),
        };
        traces.push(ChainTrace {
            thetas,
            log_post: m.column(5).iter().copied().collect(),
            accepted: (0..m.nrows())
                .map(|i| [m[(i, 6)] != 0.0, m[(i, 7)] != 0.0, m[(i, 8)] != 0.0, m[(i, 9)] != 0.0])
                .collect(),
            failures: meta
                .get(&format!("failures_{c}"))
                .and_then(|s| s.parse().ok())
                .unwrap_or(0),
            final_scales: scales,
        });
    }
    let pv = split_f64(get("priors")?, &meta_path, "priors")?;
    if pv.len() != 8 {
        return Err(bad("priors"));
    }
    let priors = PriorSpec {
        s2_shape: pv[0],
        s2_scale: pv[1],
        tau2_shape: pv[2],
        tau2_scale: pv[3],
        rho1_lo: pv[4],
        rho1_hi: pv[5],
        rho2_lo: pv[6],
        rho2_hi: pv[7],
    };
    let knots = match (meta.get("knot_indices"), meta.get("time_knots")) {
        (Some(idx), Some(tk)) => {
            let indices = idx
                .split_whitespace()
                .map(|s| s.parse::<usize>().map_err(|_| bad("knot_indices")))
                .collect::<Result<Vec<_>>>()?;
            Some(KnotSet::from_indices(&train.x, indices, split_f64(tk, &meta_path, "time_knots")?)?)
        }
        _ => None,
    };
    let mut keep = meta.clone();
    keep.retain(|k, _| matches!(k.as_str(), "chains" | "iters" | "burnin" | "seed" | "failed_chains"));
    Ok(StoredFit {
        samples: PosteriorSamples { traces, burnin, kind, meta: keep },
        knots,
        priors,
    })
}

/// One row in the layout of a results table: means and interval ends.
pub fn write_summary(path: &Path, label: &str, summary: &[ParamSummary; 4], rhat: Option<&[f64; 4]>) -> Result<()> {
    let mut header = vec!["model".to_string()];
    let mut row = vec![label.to_string()];
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        header.extend([name.to_string(), format!("{name}_lower"), format!("{name}_upper")]);
        row.extend([summary[k].mean, summary[k].lower, summary[k].upper].map(fmt_f64));
        if let Some(r) = rhat {
            header.push(format!("{name}_rhat"));
            row.push(fmt_f64(r[k]));
        }
    }
    write_csv(path, &header, [row])
}

pub fn write_prediction(path: &Path, result: &PredictionResult, grid: &TimeGrid<f64>) -> Result<()> {
    let header: Vec<String> = ["test_id", "t", "mean", "var", "lower", "upper"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let (n, t) = result.mean.shape();
    let rows = (0..n).flat_map(|i| {
        (0..t).map(move |j| {
            vec![
                i.to_string(),
                fmt_f64(grid.points()[j]),
                fmt_f64(result.mean[(i, j)]),
                fmt_f64(result.var[(i, j)]),
                fmt_f64(result.lower[(i, j)]),
                fmt_f64(result.upper[(i, j)]),
            ]
        })
    });
    write_csv(path, &header, rows)
}

pub fn read_prediction(path: &Path) -> Result<PredictionResult> {
    let (header, m) = read_matrix(path)?;
    if header != ["test_id", "t", "mean", "var", "lower", "upper"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            col: 1,
            msg: "expected columns test_id,t,mean,var,lower,upper".into(),
        });
    }
    let rows = m.nrows();
    if rows == 0 {
        return Err(Error::InsufficientData(format!("{} has no rows", path.display())));
    }
    let n = m[(rows - 1, 0)] as usize + 1;
    if rows % n != 0 {
        return Err(Error::Dimension(format!(
            "{rows} rows do not split evenly over {n} test curves"
        )));
    }
    let t = rows / n;
    for r in 0..rows {
        if m[(r, 0)] as usize != r / t {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: r + 1,
                col: 1,
                msg: "rows must be grouped by test_id in order".into(),
            });
        }
    }
    let grab = |c: usize| DMatrix::from_fn(n, t, |i, j| m[(i * t + j, c)]);
    Ok(PredictionResult {
        mean: grab(2),
        var: grab(3),
        lower: grab(4),
        upper: grab(5),
        target: PredictTarget::Y,
        n_thetas: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub mse: f64,
    pub coverage: f64,
    pub mean_length: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let header: Vec<String> = ["method", "mse", "coverage", "mean_length"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_csv(
        path,
        &header,
        rows.iter()
            .map(|r| vec![r.method.clone(), fmt_f64(r.mse), fmt_f64(r.coverage), fmt_f64(r.mean_length)]),
    )
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let (_, rows) = read_csv(path)?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != 4 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: i + 1,
                    col: r.len() + 1,
                    msg: "expected 4 fields".into(),
                });
            }
            Ok(MetricsRow {
                method: r[0].clone(),
                mse: parse_cell(path, i, 1, &r[1])?,
                coverage: parse_cell(path, i, 2, &r[2])?,
                mean_length: parse_cell(path, i, 3, &r[3])?,
            })
        })
        .collect()
}

pub fn write_depth(path: &Path, table: &DepthCoverage) -> Result<()> {
    let header: Vec<String> = ["test_id", "depth", "coverage"].iter().map(|s| s.to_string()).collect();
    write_csv(
        path,
        &header,
        table
            .depth
            .iter()
            .zip(&table.coverage)
            .enumerate()
            .map(|(i, (d, c))| vec![i.to_string(), fmt_f64(*d), fmt_f64(*c)]),
    )
}

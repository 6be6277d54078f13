//! Daily station records and the weekly functional dataset built from them.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::io::{parse_cell, read_csv};
use crate::kernel::{CurveSet, TimeGrid};

pub const DAYS: usize = 365;
pub const WEEK: usize = 7;
pub const DEFAULT_PRECIP_OFFSET: f64 = 0.05;

/// One row per station, one column per day.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherTable {
    pub stations: Vec<String>,
    pub temp: DMatrix<f64>,
    pub precip: DMatrix<f64>,
}

fn read_daily(path: &Path, nonnegative: bool) -> Result<(Vec<String>, DMatrix<f64>)> {
    let (header, rows) = read_csv(path)?;
    if rows.len() != DAYS {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: rows.len() + 1,
            col: 1,
            msg: format!("expected {DAYS} daily rows, found {}", rows.len()),
        });
    }
    let s = header.len();
    let mut m = DMatrix::zeros(s, DAYS);
    for (day, r) in rows.iter().enumerate() {
        if r.len() != s {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: day + 1,
                col: r.len().min(s) + 1,
                msg: format!("expected {s} fields, found {}", r.len()),
            });
        }
        for (j, cell) in r.iter().enumerate() {
            let v = parse_cell(path, day, j, cell)?;
            if nonnegative && v < 0.0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: day + 1,
                    col: j + 1,
                    msg: format!("negative precipitation {v}"),
                });
            }
            m[(j, day)] = v;
        }
    }
    Ok((header, m))
}

/// Both files carry a header of station names and 365 rows of daily values.
pub fn load_weather(temp_csv: &Path, precip_csv: &Path) -> Result<WeatherTable> {
    let (stations, temp) = read_daily(temp_csv, false)?;
    let (p_stations, precip) = read_daily(precip_csv, true)?;
    if stations != p_stations {
        return Err(Error::Data(
            "temperature and precipitation files list different stations".into(),
        ));
    }
    if stations.is_empty() {
        return Err(Error::InsufficientData("no stations".into()));
    }
    Ok(WeatherTable { stations, temp, precip })
}

/// Days 1, 8, ..., 365 on the grid (day - 1) / 364, with
/// `Y = log(precip + offset)`.
pub fn weekly_subsample(table: &WeatherTable, offset: f64) -> Result<FunctionalDataset<f64>> {
    if !(offset > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "precipitation offset must be positive, got {offset}"
        )));
    }
    let days: Vec<usize> = (0..DAYS).step_by(WEEK).collect();
    let grid = TimeGrid::new(days.iter().map(|&d| d as f64 / (DAYS - 1) as f64).collect())?;
    let n = table.stations.len();
    let x = DMatrix::from_fn(n, days.len(), |i, j| table.temp[(i, days[j])]);
    let y = DMatrix::from_fn(n, days.len(), |i, j| (table.precip[(i, days[j])] + offset).ln());
    let mut meta = BTreeMap::new();
    meta.insert("kind".to_string(), "weather".to_string());
    meta.insert("precip_offset".to_string(), offset.to_string());
    let mut data = FunctionalDataset::new(CurveSet::new(x, grid.clone())?, CurveSet::new(y, grid)?)?
        .with_labels(table.stations.clone())?;
    data.meta = meta;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_table(dir: &Path, name: &str, rows: usize, cell: impl Fn(usize, usize) -> String) -> std::path::PathBuf {
        let mut s = String::from("A,B,C\n");
        for d in 0..rows {
            s.push_str(&(0..3).map(|j| cell(d, j)).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        let p = dir.join(name);
        fs::write(&p, s).unwrap();
        p
    }

    #[test]
    fn weekly_grid_and_transform() {
        let dir = tempfile::tempdir().unwrap();
        let t = write_table(dir.path(), "t.csv", DAYS, |d, j| format!("{}", d as f64 - 10.0 * j as f64));
        let p = write_table(dir.path(), "p.csv", DAYS, |d, j| if j == 0 { "0".into() } else { format!("{}", d) });
        let table = load_weather(&t, &p).unwrap();
        let data = weekly_subsample(&table, DEFAULT_PRECIP_OFFSET).unwrap();
        assert_eq!(data.n_times(), 53);
        assert_eq!(data.n_curves(), 3);
        let g = data.grid().points();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[52], 1.0);
        assert_eq!(g[1], 7.0 / 364.0);
        assert_eq!(data.x.values()[(1, 2)], 14.0 - 10.0);
        assert_eq!(data.y.values()[(0, 5)], 0.05f64.ln());
        assert_eq!(data.y.values()[(2, 52)], 364.05f64.ln());
        assert_eq!(data.labels.as_ref().unwrap()[1], "B");
    }

    #[test]
    fn rejects_bad_tables() {
        let dir = tempfile::tempdir().unwrap();
        let good = write_table(dir.path(), "g.csv", DAYS, |_, _| "1".into());
        let short = write_table(dir.path(), "s.csv", 364, |_, _| "1".into());
        assert!(matches!(load_weather(&short, &good), Err(Error::Parse { .. })));
        let neg = write_table(dir.path(), "n.csv", DAYS, |d, j| if (d, j) == (9, 2) { "-0.5".into() } else { "1".into() });
        match load_weather(&good, &neg) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (10, 3)),
            other => panic!("{other:?}"),
        }
        let junk = write_table(dir.path(), "j.csv", DAYS, |d, j| if (d, j) == (0, 1) { "x".into() } else { "1".into() });
        match load_weather(&junk, &good) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (1, 2)),
            other => panic!("{other:?}"),
        }
    }
}

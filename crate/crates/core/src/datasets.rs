//! Time series and sliding-window regression sets.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Environment variable holding the root for relative dataset paths.
pub const DATA_ROOT_ENV: &str = "LAZYDYN_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub name: String,
    pub source: String,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `sin(0.1 i) + c eps_i` for `i = 0..n`.
pub fn gen_sine(c: f64, n: usize, rng: &mut SeededRng) -> Result<TimeSeries> {
    if n == 0 {
        return Err(Error::InvalidInput("sine series needs n >= 1".into()));
    }
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::InvalidInput(format!("noise level {c}")));
    }
    let values = (0..n)
        .map(|i| {
            let clean = (0.1 * i as f64).sin();
            if c > 0.0 {
                clean + c * rng.normal()
            } else {
                clean
            }
        })
        .collect();
    Ok(TimeSeries {
        values,
        name: "sine".into(),
        source: format!("generated c={c} seed={} stream={}", rng.seed(), rng.stream()),
    })
}

/// Relative paths are looked up under `$LAZYDYN_DATA` when it is set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            return Path::new(&root).join(path);
        }
    }
    path.to_path_buf()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSeries {
    pub series: TimeSeries,
    /// Rows whose value did not parse as a finite number.
    pub dropped: usize,
}

/// Reads one numeric column of a headed CSV file, keeping row order.
pub fn load_csv_series(path: &Path, column: &str) -> Result<LoadedSeries> {
    let full = resolve_data_path(path);
    if !full.is_file() {
        return Err(Error::MissingFile(full));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(&full)?;
    let idx = reader
        .headers()?
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| Error::MissingColumn(column.to_string()))?;
    let mut values = Vec::new();
    let mut dropped = 0;
    for rec in reader.records() {
        let rec = rec?;
        match rec.get(idx).map(|v| v.trim().trim_matches('"').parse::<f64>()) {
            Some(Ok(v)) if v.is_finite() => values.push(v),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} unparseable rows", full.display());
    }
    if values.is_empty() {
        return Err(Error::EmptySeries { dropped });
    }
    Ok(LoadedSeries {
        series: TimeSeries {
            values,
            name: column.to_string(),
            source: full.display().to_string(),
        },
        dropped,
    })
}

/// Rows `X[i] = series[i..i+k]`, `Y[i] = series[i+k]`; the first `n_train`
/// rows form the training split, the next `n_test` the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub x_train: Array2<f64>,
    pub y_train: Array1<f64>,
    pub x_test: Array2<f64>,
    pub y_test: Array1<f64>,
    pub window: usize,
}

impl WindowedDataset {
    pub fn n_train(&self) -> usize {
        self.y_train.len()
    }

    pub fn n_test(&self) -> usize {
        self.y_test.len()
    }

    /// The stretch of the series that the training rows were cut from.
    pub fn train_segment(&self) -> Vec<f64> {
        let mut seg: Vec<f64> = self.x_train.row(0).to_vec();
        seg.extend(self.y_train.iter());
        seg
    }

    pub fn train_view(&self) -> crate::sim::TrainData<'_> {
        crate::sim::TrainData {
            x: self.x_train.view(),
            y: self.y_train.view(),
            x_test: (self.n_test() > 0).then(|| self.x_test.view()),
            y_test: (self.n_test() > 0).then(|| self.y_test.view()),
        }
    }
}

pub fn window(series: &TimeSeries, k: usize, n_train: usize, n_test: usize) -> Result<WindowedDataset> {
    if k == 0 || n_train == 0 {
        return Err(Error::InvalidInput("window and train size must be positive".into()));
    }
    let needed = n_train + n_test + k;
    if series.len() < needed {
        return Err(Error::InsufficientLength {
            len: series.len(),
            needed,
        });
    }
    let v = Array1::from(series.values.clone());
    let rows = n_train + n_test;
    let x = Array2::from_shape_fn((rows, k), |(i, j)| v[i + j]);
    let y = v.slice(s![k..k + rows]).to_owned();
    Ok(WindowedDataset {
        x_train: x.slice(s![..n_train, ..]).to_owned(),
        y_train: y.slice(s![..n_train]).to_owned(),
        x_test: x.slice(s![n_train.., ..]).to_owned(),
        y_test: y.slice(s![n_train..]).to_owned(),
        window: k,
    })
}

/// `v -> (v - mean) / scale`, fitted on the training segment only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub scale: f64,
}

impl Standardizer {
    pub fn identity() -> Self {
        Self { mean: 0.0, scale: 1.0 }
    }

    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("standardizer fit on no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::ZeroVariance);
        }
        Ok(Self { mean, scale: var.sqrt() })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.mean
    }
}

pub fn standardize(data: &WindowedDataset) -> Result<(WindowedDataset, Standardizer)> {
    let t = Standardizer::fit(&data.train_segment())?;
    let f = |a: &Array2<f64>| a.mapv(|v| t.apply(v));
    let g = |a: &Array1<f64>| a.mapv(|v| t.apply(v));
    Ok((
        WindowedDataset {
            x_train: f(&data.x_train),
            y_train: g(&data.y_train),
            x_test: f(&data.x_test),
            y_test: g(&data.y_test),
            window: data.window,
        },
        t,
    ))
}

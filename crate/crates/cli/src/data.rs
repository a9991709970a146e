//! Dataset loading, synthetic generation, and train/test standardisation.

use std::path::Path;

use cglb_core::kernels::{kernel_matrix_sym, Floors, HyperParams};
use cglb_core::linalg::{cholesky, JitterPolicy};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("target column '{0}' not found in header")]
    MissingTarget(String),
    #[error("need at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerical(#[from] cglb_core::GpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: DMatrix::from_fn(rows.len(), self.dim(), |i, j| self.x[(rows[i], j)]),
            y: DVector::from_fn(rows.len(), |i, _| self.y[rows[i]]),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
        }
    }
}

/// Reads a headered CSV; every column other than `target` is a feature.
/// Row numbers in errors count data rows from 1.
pub fn load_csv(path: &Path, target: &str) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let t = header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| DataError::MissingTarget(target.to_string()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, h)| h.clone())
        .collect();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        for (j, field) in rec.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| DataError::Parse {
                row,
                column: header[j].clone(),
                message: format!("'{field}' is not a number"),
            })?;
            if !value.is_finite() {
                return Err(DataError::Parse {
                    row,
                    column: header[j].clone(),
                    message: format!("non-finite value '{field}'"),
                });
            }
            if j == t {
                ys.push(value);
            } else {
                xs.push(value);
            }
        }
    }
    let n = ys.len();
    let d = feature_names.len();
    Ok(Dataset {
        x: DMatrix::from_row_slice(n, d, &xs),
        y: DVector::from_vec(ys),
        feature_names,
        target_name: target.to_string(),
    })
}

/// Writes features then target, with shortest round-trip float formatting.
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = ds.feature_names.clone();
    header.push(ds.target_name.clone());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.y[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column statistics of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Standardizer {
    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for j in 0..ds.dim() {
            out.x
                .column_mut(j)
                .apply(|v| *v = (*v - self.x_mean[j]) / self.x_std[j]);
        }
        out.y.apply(|v| *v = (*v - self.y_mean) / self.y_std);
        out
    }

    pub fn unscale_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_std + self.y_mean)
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: Standardizer,
    pub warnings: Vec<String>,
}

/// Mean and population standard deviation; a zero spread is replaced by 1.
fn column_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, bool) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 * mean.abs().max(1.0) {
        (mean, std, false)
    } else {
        (mean, 1.0, true)
    }
}

/// Seeded random split into train and test, standardised with training
/// statistics.
pub fn split_standardize(ds: &Dataset, fraction: f64, seed: u64) -> Result<Split, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let n = ds.len();
    if n < 3 {
        return Err(DataError::TooFewRows(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train_raw = ds.select(&order[..n_train]);
    let test_raw = ds.select(&order[n_train..]);

    let mut warnings = Vec::new();
    let mut x_mean = Vec::with_capacity(ds.dim());
    let mut x_std = Vec::with_capacity(ds.dim());
    for j in 0..ds.dim() {
        let (m, s, constant) = column_stats(train_raw.x.column(j).iter().copied());
        if constant {
            let msg = format!(
                "feature '{}' is constant on the training split; std set to 1",
                ds.feature_names[j]
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        x_mean.push(m);
        x_std.push(s);
    }
    let (y_mean, y_std, constant) = column_stats(train_raw.y.iter().copied());
    if constant {
        let msg = format!(
            "target '{}' is constant on the training split; std set to 1",
            ds.target_name
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let stats = Standardizer {
        x_mean,
        x_std,
        y_mean,
        y_std,
    };
    Ok(Split {
        train: stats.apply(&train_raw),
        test: stats.apply(&test_raw),
        stats,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Sum of a few random sinusoids of the inputs.
    Sine,
    /// One draw from a Matérn 3/2 GP prior.
    GpDraw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub d: usize,
    /// Observation noise variance.
    pub noise: f64,
    /// GP draw only.
    pub lengthscale: f64,
    /// GP draw only.
    pub variance: f64,
    /// Inputs are uniform on `[-half_width, half_width]^d`.
    pub half_width: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Sine,
            n: 300,
            d: 1,
            noise: 0.01,
            lengthscale: 0.5,
            variance: 1.0,
            half_width: 3.0,
        }
    }
}

impl SyntheticSpec {
    /// The generating hyperparameters of a GP draw, zero mean.
    pub fn true_theta(&self) -> Result<HyperParams, DataError> {
        Ok(HyperParams::from_constrained(
            self.variance,
            &vec![self.lengthscale; self.d],
            self.noise,
            0.0,
            Floors::uniform(0.0),
        )?)
    }
}

pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    if spec.n == 0 || spec.d == 0 {
        return Err(DataError::InvalidSynthetic("n and d must be positive".into()));
    }
    if !(spec.noise > 0.0 && spec.half_width > 0.0) {
        return Err(DataError::InvalidSynthetic(
            "noise and half_width must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = spec.half_width;
    let x = DMatrix::from_fn(spec.n, spec.d, |_, _| rng.random_range(-h..h));
    let f = match spec.kind {
        SyntheticKind::Sine => {
            let comps: Vec<(f64, Vec<f64>, f64)> = (0..3)
                .map(|_| {
                    let amp = rng.random_range(0.3..1.0);
                    let w: Vec<f64> = (0..spec.d).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (amp, w, phase)
                })
                .collect();
            DVector::from_fn(spec.n, |i, _| {
                comps
                    .iter()
                    .map(|(a, w, p)| a * (x.row(i).iter().zip(w).map(|(xi, wi)| xi * wi).sum::<f64>() + p).sin())
                    .sum()
            })
        }
        SyntheticKind::GpDraw => {
            if !(spec.lengthscale > 0.0 && spec.variance > 0.0) {
                return Err(DataError::InvalidSynthetic(
                    "lengthscale and variance must be positive".into(),
                ));
            }
            let theta = spec.true_theta()?;
            let mut k = kernel_matrix_sym(&theta.kernel(), &x)?;
            k.add_diagonal(1e-8 * spec.variance);
            let chol = cholesky(&k, &JitterPolicy::default())?;
            let e = DVector::from_fn(spec.n, |_, _| rng.sample::<f64, _>(StandardNormal));
            chol.l() * e
        }
    };
    let sd = spec.noise.sqrt();
    let y = DVector::from_fn(spec.n, |i, _| f[i] + sd * rng.sample::<f64, _>(StandardNormal));
    Ok(Dataset {
        x,
        y,
        feature_names: (0..spec.d).map(|j| format!("x{j}")).collect(),
        target_name: "y".into(),
    })
}

//! Datasets, standardization, and seeded sample splitting.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Feature matrix (rows are samples), response, and the optional set of
/// truly non-null feature indices (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub truth: Option<BTreeSet<usize>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() < 2 || x.ncols() < 1 {
            return Err(Error::shape(format!(
                "need n >= 2 and d >= 1, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(Self { x, y, truth: None })
    }

    pub fn with_truth(mut self, truth: BTreeSet<usize>) -> Result<Self> {
        if let Some(&j) = truth.iter().find(|&&j| j >= self.d()) {
            return Err(Error::shape(format!(
                "truth index {} outside 1..={}",
                j + 1,
                self.d()
            )));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            truth: self.truth.clone(),
        }
    }
}

/// Per-column affine transform to zero mean and unit (population) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Relative std below which a column is treated as constant.
const CONSTANT_TOL: f64 = 1e-12;

impl StandardizationParams {
    /// Estimates means and population standard deviations.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let mut feature_means = Vec::with_capacity(x.ncols());
        let mut feature_stds = Vec::with_capacity(x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            let (m, s) = mean_std(col.iter().copied());
            if !(s > CONSTANT_TOL * m.abs().max(1.0)) {
                return Err(Error::ConstantColumn(j));
            }
            feature_means.push(m);
            feature_stds.push(s);
        }
        let (y_mean, y_std) = mean_std(y.iter().copied());
        if !(y_std > CONSTANT_TOL * y_mean.abs().max(1.0)) {
            return Err(Error::ConstantColumn(x.ncols()));
        }
        Ok(Self {
            feature_means,
            feature_stds,
            y_mean,
            y_std,
        })
    }

    /// Identity transform for `d` features.
    pub fn identity(d: usize) -> Self {
        Self {
            feature_means: vec![0.0; d],
            feature_stds: vec![1.0; d],
            y_mean: 0.0,
            y_std: 1.0,
        }
    }

    pub fn d(&self) -> usize {
        self.feature_means.len()
    }

    pub fn apply_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.feature_means[j], self.feature_stds[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        out
    }

    pub fn invert_x(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.feature_means[j], self.feature_stds[j]);
            col.apply(|v| *v = *v * s + m);
        }
        out
    }

    pub fn apply_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_std)
    }

    pub fn invert_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_std + self.y_mean)
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        Dataset {
            x: self.apply_x(&data.x),
            y: self.apply_y(&data.y),
            truth: data.truth.clone(),
        }
    }
}

/// Standardizes every feature column and the response using statistics of
/// `data` itself.
pub fn standardize(data: &Dataset) -> Result<(Dataset, StandardizationParams)> {
    let params = StandardizationParams::fit(&data.x, &data.y)?;
    Ok((params.apply(data), params))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Uniformly random train/test split of `0..n`; the train side gets
/// `round(n * train_fraction)` samples.
pub fn split_train_test(n: usize, train_fraction: f64, rng_seed: u64) -> Result<SplitIndices> {
    let n_train = (n as f64 * train_fraction).round() as usize;
    if !(train_fraction > 0.0 && train_fraction < 1.0) || n_train == 0 || n_train >= n {
        return Err(Error::InvalidFraction {
            n,
            fraction: train_fraction,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(rng_seed, &[seed::tag::SPLIT]));
    let test = perm.split_off(n_train);
    Ok(SplitIndices { train: perm, test })
}

/// Fold label (0-based) of every sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }
}

/// Balanced random partition of `0..n` into `k` folds.
pub fn kfold_indices(n: usize, k: usize, rng_seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::InvalidK { n, k });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(rng_seed, &[seed::tag::FOLDS]));
    let mut fold_of = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k })
}

/// Contents of a feature CSV: every column except `y` is a feature.
#[derive(Debug, Clone)]
pub struct FeatureCsv {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Option<DVector<f64>>,
}

impl FeatureCsv {
    pub fn into_dataset(self) -> Result<Dataset> {
        let y = self
            .y
            .ok_or_else(|| Error::Config("CSV has no `y` column".into()))?;
        Dataset::new(self.x, y)
    }
}

/// Reads a headered CSV of features with an optional `y` column.
pub fn load_feature_csv(path: &Path) -> Result<FeatureCsv> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader.headers().map_err(|e| Error::Parse {
        row: 1,
        column: 0,
        message: e.to_string(),
    })?;
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    if names.is_empty() || names.iter().all(|s| s.is_empty()) {
        return Err(Error::Parse {
            row: 1,
            column: 0,
            message: "missing header".into(),
        });
    }
    let y_col = names.iter().position(|s| s == "y");
    let width = names.len();
    let d = width - usize::from(y_col.is_some());
    if d == 0 {
        return Err(Error::Parse {
            row: 1,
            column: 0,
            message: "no feature columns".into(),
        });
    }
    let mut feats = Vec::new();
    let mut ys = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::shape(format!(
                "row {row} has {} fields, header has {width}",
                rec.len()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if Some(c) == y_col {
                ys.push(v);
            } else {
                feats.push(v);
            }
        }
    }
    let n = feats.len() / d;
    if n == 0 {
        return Err(Error::Parse {
            row: 2,
            column: 0,
            message: "no data rows".into(),
        });
    }
    let feature_names = names
        .iter()
        .enumerate()
        .filter(|(c, _)| Some(*c) != y_col)
        .map(|(_, s)| s.clone())
        .collect();
    Ok(FeatureCsv {
        names: feature_names,
        x: DMatrix::from_row_slice(n, d, &feats),
        y: y_col.map(|_| DVector::from_vec(ys)),
    })
}

/// Writes `x1..xd,y`.
pub fn write_dataset_csv(data: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = (1..=data.d()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    let wrap = |e: csv::Error| Error::io(path, e.into());
    w.write_record(&header).map_err(wrap)?;
    for i in 0..data.n() {
        let mut row: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        row.push(data.y[i].to_string());
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a truth sidecar: one 1-based feature index per line.
pub fn load_truth(path: &Path) -> Result<BTreeSet<usize>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeSet::new();
    for (r, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let j: usize = t.parse().map_err(|_| Error::Parse {
            row: r + 1,
            column: 1,
            message: format!("not an index: {t:?}"),
        })?;
        if j == 0 {
            return Err(Error::Parse {
                row: r + 1,
                column: 1,
                message: "indices are 1-based".into(),
            });
        }
        out.insert(j - 1);
    }
    Ok(out)
}

pub fn write_truth(truth: &BTreeSet<usize>, path: &Path) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for j in truth {
        writeln!(file, "{}", j + 1).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

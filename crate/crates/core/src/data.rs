//! Synthetic GP data, delimited-text ingestion, preprocessing and k-fold splits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::kernel::{factor_covariance, HyperParams};

/// How the second Gamma parameter of the simulated `θ` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaConvention {
    /// `theta_scale` is a scale: mean `shape · scale`.
    Scale,
    /// `theta_scale` is a rate: mean `shape / scale`.
    Rate,
}

impl GammaConvention {
    pub fn name(self) -> &'static str {
        match self {
            GammaConvention::Scale => "scale",
            GammaConvention::Rate => "rate",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "scale" => Some(GammaConvention::Scale),
            "rate" => Some(GammaConvention::Rate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub d: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of `θ` set to zero (`⌊s·d⌋` entries).
    pub sparsity: f64,
    /// Equicorrelation between covariates.
    pub rho_corr: f64,
    pub tau_true: f64,
    pub noise_var: f64,
    pub theta_shape: f64,
    pub theta_scale: f64,
    pub convention: GammaConvention,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(d: usize, n_train: usize, sparsity: f64, rho_corr: f64, seed: u64) -> Self {
        SimConfig {
            d,
            n_train,
            n_test: 300,
            sparsity,
            rho_corr,
            tau_true: 2.0,
            noise_var: 0.1,
            theta_shape: 6.0,
            theta_scale: 24.0,
            convention: GammaConvention::Scale,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return invalid("d must be at least 1");
        }
        if self.n_train == 0 {
            return invalid("n_train must be at least 1");
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return invalid(format!("sparsity must lie in [0, 1), got {}", self.sparsity));
        }
        if !(0.0..1.0).contains(&self.rho_corr) {
            return invalid(format!(
                "rho_corr must lie in [0, 1) for a positive definite covariate covariance, got {}",
                self.rho_corr
            ));
        }
        for (name, v) in [
            ("tau_true", self.tau_true),
            ("noise_var", self.noise_var),
            ("theta_shape", self.theta_shape),
            ("theta_scale", self.theta_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Number of exactly-zero entries in the generated `θ`.
    pub fn n_zero(&self) -> usize {
        (self.sparsity * self.d as f64).floor() as usize
    }
}

/// Maps raw columns and response to the modelling scale:
/// `x'_j = (x[columns[j]] − means[j]) / scales[j]`, `y' = y − y_center`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub raw_dim: usize,
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub y_center: f64,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Standardization {
            raw_dim: d,
            columns: (0..d).collect(),
            means: vec![0.0; d],
            scales: vec![1.0; d],
            y_center: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.columns.len() == self.raw_dim
            && self.columns.iter().enumerate().all(|(i, &c)| i == c)
            && self.means.iter().all(|&m| m == 0.0)
            && self.scales.iter().all(|&s| s == 1.0)
            && self.y_center == 0.0
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// Transforms a raw dataset (one whose own standardization is the
    /// identity) onto this scale.
    pub fn apply(&self, raw: &Dataset) -> Result<Dataset> {
        if !raw.standardization.is_identity() {
            return invalid("apply expects a dataset in raw units");
        }
        if raw.d() != self.raw_dim {
            return invalid(format!(
                "dataset has {} covariates, standardization expects {}",
                raw.d(),
                self.raw_dim
            ));
        }
        let x = DMatrix::from_fn(raw.n(), self.dim(), |i, j| {
            (raw.x[(i, self.columns[j])] - self.means[j]) / self.scales[j]
        });
        Ok(Dataset {
            x,
            y: raw.y.iter().map(|v| v - self.y_center).collect(),
            feature_names: self.columns.iter().map(|&c| raw.feature_names[c].clone()).collect(),
            response_name: raw.response_name.clone(),
            binary_mask: self.columns.iter().map(|&c| raw.binary_mask[c]).collect(),
            standardization: self.clone(),
        })
    }

    /// Response on the modelling scale back to raw units.
    pub fn restore_y(&self, y: f64) -> f64 {
        y + self.y_center
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub response_name: String,
    /// Per-column flag: exactly two distinct values.
    pub binary_mask: Vec<bool>,
    /// Map from the raw data to the values held here.
    pub standardization: Standardization,
}

impl Dataset {
    /// Raw dataset with identity standardization.
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, feature_names: Vec<String>, response_name: String) -> Result<Self> {
        if x.nrows() != y.len() {
            return invalid(format!("X has {} rows but y has {} entries", x.nrows(), y.len()));
        }
        if feature_names.len() != x.ncols() {
            return invalid(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                x.ncols()
            ));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return invalid("dataset values must be finite");
        }
        let binary_mask = (0..x.ncols())
            .map(|j| distinct_count(x.column(j).iter(), 3) == 2)
            .collect();
        let d = x.ncols();
        Ok(Dataset {
            x,
            y,
            feature_names,
            response_name,
            binary_mask,
            standardization: Standardization::identity(d),
        })
    }

    /// Raw dataset with columns named `x1…xd` and response `y`.
    pub fn unnamed(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Dataset::new(x, y, names, "y".into())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&i) = idx.iter().find(|&&i| i >= self.n()) {
            return invalid(format!("row index {i} out of range for {} rows", self.n()));
        }
        let x = DMatrix::from_fn(idx.len(), self.d(), |r, c| self.x[(idx[r], c)]);
        Ok(Dataset {
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            ..self.clone()
        })
    }
}

fn distinct_count<'a>(values: impl Iterator<Item = &'a f64>, cap: usize) -> usize {
    let mut seen: Vec<f64> = Vec::with_capacity(cap);
    for &v in values {
        if !seen.contains(&v) {
            seen.push(v);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub theta: Vec<f64>,
    pub tau: f64,
    pub noise_var: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: SimTruth,
}

/// Rows i.i.d. `N(0, B)` with unit variances and equicorrelation `rho`.
pub fn equicorrelated_normals<R: Rng + ?Sized>(n: usize, d: usize, rho: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return invalid(format!("rho must lie in [0, 1), got {rho}"));
    }
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let common: f64 = StandardNormal.sample(rng);
        for j in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            x[(i, j)] = a * common + b * e;
        }
    }
    Ok(x)
}

/// One draw of `y ~ N(0, K(X) + σ²I)`.
pub fn draw_gp_response<R: Rng + ?Sized>(x: &DMatrix<f64>, params: &HyperParams, rng: &mut R) -> Result<Vec<f64>> {
    let l = factor_covariance(x, params)?.factor.chol_lower();
    let e: Vec<f64> = (0..x.nrows()).map(|_| StandardNormal.sample(rng)).collect();
    Ok((0..x.nrows())
        .map(|i| (0..=i).map(|j| l[(i, j)] * e[j]).sum())
        .collect())
}

/// Draws `θ`, covariates and one joint response over train and test rows.
pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = match cfg.convention {
        GammaConvention::Scale => cfg.theta_scale,
        GammaConvention::Rate => 1.0 / cfg.theta_scale,
    };
    let gamma = Gamma::new(cfg.theta_shape, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut theta: Vec<f64> = (0..cfg.d).map(|_| gamma.sample(&mut rng)).collect();
    for j in index::sample(&mut rng, cfg.d, cfg.n_zero()) {
        theta[j] = 0.0;
    }
    let n = cfg.n_train + cfg.n_test;
    let x = equicorrelated_normals(n, cfg.d, cfg.rho_corr, &mut rng)?;
    let params = HyperParams::new(theta.clone(), cfg.tau_true, cfg.noise_var)?;
    let y = draw_gp_response(&x, &params, &mut rng)?;
    let all = Dataset::unnamed(x, y)?;
    let train_idx: Vec<usize> = (0..cfg.n_train).collect();
    let test_idx: Vec<usize> = (cfg.n_train..n).collect();
    let mut train = all.subset(&train_idx)?;
    let mut test = all.subset(&test_idx)?;
    train.binary_mask = vec![false; cfg.d];
    test.binary_mask = vec![false; cfg.d];
    Ok(Simulation {
        train,
        test,
        truth: SimTruth {
            theta,
            tau: cfg.tau_true,
            noise_var: cfg.noise_var,
        },
    })
}

fn parse_error(row: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column,
        message: message.into(),
    }
}

/// Reads a numeric table with a header row. Rows are counted from 1 with the
/// header as row 1; columns from 1.
pub fn read_table<R: Read>(reader: R, response_column: &str, delimiter: u8) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_error(1, 0, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let resp = header
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| parse_error(1, 0, format!("no column named {response_column:?}")))?;
    let width = header.len();
    let mut cells = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, expected_len, .. } => parse_error(
                row,
                (*len as usize).min(*expected_len as usize) + 1,
                format!("expected {expected_len} fields, found {len}"),
            ),
            _ => parse_error(row, 0, e.to_string()),
        })?;
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_error(row, j + 1, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_error(row, j + 1, format!("not a finite number: {cell:?}")));
            }
            if j == resp {
                y.push(v);
            } else {
                cells.push(v);
            }
        }
    }
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != resp)
        .map(|(_, h)| h.clone())
        .collect();
    let x = DMatrix::from_row_slice(y.len(), width - 1, &cells);
    Dataset::new(x, y, names, response_column.to_string())
}

pub fn load_table(path: impl AsRef<Path>, response_column: &str, delimiter: u8) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_table(std::io::BufReader::new(file), response_column, delimiter)
}

/// Writes covariates then response, full precision, header first.
pub fn write_table_to<W: Write>(data: &Dataset, writer: W, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = data.feature_names.clone();
    header.push(data.response_name.clone());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = (0..data.d()).map(|j| format_f64(data.x[(i, j)])).collect();
        rec.push(format_f64(data.y[i]));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table(data: &Dataset, path: impl AsRef<Path>, delimiter: u8) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_table_to(data, std::io::BufWriter::new(file), delimiter)
}

/// Shortest text that parses back to the same double.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn mean_sd(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let ss = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1.0).max(1.0)).sqrt())
}

/// Drops constant columns, scales non-binary columns to mean 0 and sample
/// standard deviation 1, and centers the response. The returned
/// standardization composes with the input's, so it always maps raw data to
/// the returned values.
pub fn preprocess(data: &Dataset) -> Result<Dataset> {
    let n = data.n();
    if n < 2 {
        return invalid("preprocessing needs at least two rows");
    }
    let old = &data.standardization;
    let mut keep = Vec::new();
    let mut std = Standardization {
        raw_dim: old.raw_dim,
        columns: Vec::new(),
        means: Vec::new(),
        scales: Vec::new(),
        y_center: 0.0,
    };
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..data.d() {
        let col: Vec<f64> = data.x.column(j).iter().copied().collect();
        if col.iter().all(|&v| v == col[0]) {
            continue;
        }
        keep.push(j);
        std.columns.push(old.columns[j]);
        if data.binary_mask[j] {
            std.means.push(old.means[j]);
            std.scales.push(old.scales[j]);
            cols.push(col);
        } else {
            let (m, s) = mean_sd(&col);
            std.means.push(old.means[j] + old.scales[j] * m);
            std.scales.push(old.scales[j] * s);
            cols.push(col.iter().map(|v| (v - m) / s).collect());
        }
    }
    if keep.is_empty() {
        return Err(Error::EmptyDesign);
    }
    let y_mean = data.y.iter().sum::<f64>() / n as f64;
    std.y_center = old.y_center + y_mean;
    let x = DMatrix::from_fn(n, keep.len(), |i, j| cols[j][i]);
    Ok(Dataset {
        x,
        y: data.y.iter().map(|v| v - y_mean).collect(),
        feature_names: keep.iter().map(|&j| data.feature_names[j].clone()).collect(),
        response_name: data.response_name.clone(),
        binary_mask: keep.iter().map(|&j| data.binary_mask[j]).collect(),
        standardization: std,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random partition of the rows into `k` test folds whose sizes differ by at
/// most one. Index lists are sorted.
pub fn kfold(data: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = data.n();
    if k < 2 {
        return invalid(format!("k must be at least 2, got {k}"));
    }
    if k > n {
        return invalid(format!("k = {k} exceeds the number of rows {n}"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test: BTreeSet<usize> = perm.iter().skip(f).step_by(k).copied().collect();
        let train = (0..n).filter(|i| !test.contains(i)).collect();
        folds.push(Fold {
            train,
            test: test.into_iter().collect(),
        });
    }
    Ok(folds)
}

/// Preprocesses the training rows of a raw dataset and applies the same
/// transformation to its test rows.
pub fn fold_datasets(raw: &Dataset, fold: &Fold) -> Result<(Dataset, Dataset)> {
    let train = preprocess(&raw.subset(&fold.train)?)?;
    let test = train.standardization.apply(&raw.subset(&fold.test)?)?;
    Ok((train, test))
}

/// Ordered `key=value` text record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest::default()
    }

    /// Sets `key`, replacing an earlier value in place.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `key` parsed as `T`, or a configuration error naming the key.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("manifest is missing {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("manifest value {key}={raw:?} is malformed")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_error(i + 1, 0, format!("expected key=value, got {line:?}")))?;
            m.set(k, v);
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Manifest::from_text(&std::fs::read_to_string(path)?)
    }
}

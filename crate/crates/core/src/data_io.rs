//! Dataset loading, standardisation, folds and synthetic fixtures.
//!
//! Synthetic data is drawn from `ChaCha8Rng::seed_from_u64(seed)`: per row the
//! feature uniforms in column order, then one standard normal (ziggurat, as
//! implemented by `rand_distr::StandardNormal`) for the noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::ConfigInvalid(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    /// Population (1/N) statistics.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Statistics fitted on a training split and re-applied to any other split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    /// Names of the retained columns, in order.
    pub feature_names: Vec<String>,
    pub columns: Vec<ColumnStats>,
    /// Present for regression only.
    pub target: Option<ColumnStats>,
    /// Constant columns removed during fitting.
    pub dropped: Vec<String>,
}

impl Standardization {
    /// Applies the stored transform to a raw dataset with the original columns.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let keep: Vec<usize> = self
            .feature_names
            .iter()
            .map(|name| {
                ds.feature_names.iter().position(|n| n == name).ok_or_else(|| Error::MissingColumn(name.clone()))
            })
            .collect::<Result<_>>()?;
        let x = Matrix::from_fn(ds.len(), keep.len(), |i, j| self.columns[j].forward(ds.x.get(i, keep[j])));
        let y = match self.target {
            Some(t) => ds.y.iter().map(|&v| t.forward(v)).collect(),
            None => ds.y.clone(),
        };
        Ok(Dataset { x, y, feature_names: self.feature_names.clone(), task: ds.task })
    }

    /// Raw feature row to model space.
    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.columns).map(|(&v, s)| s.forward(v)).collect()
    }

    pub fn target_scale(&self) -> f64 {
        self.target.map_or(1.0, |t| t.std)
    }

    pub fn target_to_original(&self, v: f64) -> f64 {
        self.target.map_or(v, |t| t.inverse(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub task: Task,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>, feature_names: Vec<String>, task: Task) -> Result<Self> {
        if x.rows() != y.len() || x.cols() != feature_names.len() {
            return Err(Error::ShapeMismatch(format!(
                "design {}x{}, {} targets, {} names",
                x.rows(),
                x.cols(),
                y.len(),
                feature_names.len()
            )));
        }
        if let Some(i) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::ParseError {
                row: i / x.cols().max(1),
                col: i % x.cols().max(1),
                msg: "non-finite value".into(),
            });
        }
        if task == Task::Classification {
            if let Some((row, &value)) = y.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
                return Err(Error::NonBinaryTarget { row, value });
            }
        }
        Ok(Self { x, y, feature_names, task })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            task: self.task,
        }
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        self.x.column_values(d)
    }
}

/// Parses CSV text: comma separated, header row, no quoting.
///
/// `ParseError` rows and columns are 1-based positions in the file, so the
/// header is row 1.
pub fn parse_csv(text: &str, target_column: &str, task: Task) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) =
        lines.next().ok_or_else(|| Error::ParseError { row: 1, col: 1, msg: "missing header row".into() })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let target_idx =
        names.iter().position(|n| n == target_column).ok_or_else(|| Error::MissingColumn(target_column.to_string()))?;

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (line_no, line) in lines {
        let row = line_no + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(Error::ParseError {
                row,
                col: cells.len().min(names.len()) + 1,
                msg: format!("expected {} cells, found {}", names.len(), cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::ParseError {
                row,
                col: c + 1,
                msg: format!("not a number: {:?}", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::ParseError { row, col: c + 1, msg: format!("non-finite value {:?}", cell.trim()) });
            }
            if c == target_idx {
                if task == Task::Classification && v != 0.0 && v != 1.0 {
                    return Err(Error::NonBinaryTarget { row, value: v });
                }
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    let feature_names: Vec<String> =
        names.into_iter().enumerate().filter(|&(i, _)| i != target_idx).map(|(_, n)| n).collect();
    let x = Matrix::from_row_major(y.len(), feature_names.len(), x)?;
    Dataset::new(x, y, feature_names, task)
}

pub fn load_csv(path: impl AsRef<Path>, target_column: &str, task: Task) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, target_column, task)
}

/// Writes a dataset with the target as the last column, 17 significant digits.
pub fn write_csv(ds: &Dataset, target_name: &str, mut out: impl std::io::Write) -> Result<()> {
    let mut header = ds.feature_names.join(",");
    header.push(',');
    header.push_str(target_name);
    writeln!(out, "{header}")?;
    for i in 0..ds.len() {
        let mut line = String::new();
        for v in ds.x.row(i) {
            line.push_str(&format!("{v:.17e},"));
        }
        line.push_str(&format!("{:.17e}", ds.y[i]));
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Fits population statistics on `ds`, drops constant columns and returns the
/// standardised copy.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Standardization)> {
    let mut names = Vec::new();
    let mut columns = Vec::new();
    let mut dropped = Vec::new();
    for d in 0..ds.num_features() {
        let stats = ColumnStats::of(&ds.column(d));
        if stats.std > 1e-12 * stats.mean.abs().max(1.0) {
            names.push(ds.feature_names[d].clone());
            columns.push(stats);
        } else {
            dropped.push(ds.feature_names[d].clone());
        }
    }
    let target = match ds.task {
        Task::Regression => {
            let t = ColumnStats::of(&ds.y);
            if t.std == 0.0 {
                return Err(Error::ConfigInvalid("regression target is constant".into()));
            }
            Some(t)
        }
        Task::Classification => None,
    };
    let stats = Standardization { feature_names: names, columns, target, dropped };
    let out = stats.apply(ds)?;
    Ok((out, stats))
}

/// Ground-truth generators of the synthetic fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    /// Four additive components; the fourth is identically zero.
    Toy,
    /// First toy component plus `3 x₂ x₃` (0-based columns 1 and 2).
    Interaction,
}

pub fn toy_component(d: usize, x: f64) -> f64 {
    match d {
        0 => 8.0 * (x - 0.5).powi(2),
        1 => 0.1 * (-8.0 * x + 4.0).exp(),
        2 => 5.0 * (-2.0 * (2.0 * x - 1.0).powi(2)).exp(),
        _ => 0.0,
    }
}

impl GroundTruth {
    /// Additive component `d`, or `None` if the function has no such term.
    pub fn component(&self, d: usize, x: f64) -> Option<f64> {
        match self {
            GroundTruth::Toy if d < 4 => Some(toy_component(d, x)),
            GroundTruth::Interaction if d == 0 => Some(toy_component(0, x)),
            GroundTruth::Interaction if d == 3 => Some(0.0),
            _ => None,
        }
    }

    pub fn eval(&self, row: &[f64]) -> f64 {
        match self {
            GroundTruth::Toy => (0..4).map(|d| toy_component(d, row[d])).sum(),
            GroundTruth::Interaction => toy_component(0, row[0]) + 3.0 * row[1] * row[2],
        }
    }

    /// 0-based interacting pair, if any.
    pub fn interacting_pair(&self) -> Option<(usize, usize)> {
        match self {
            GroundTruth::Toy => None,
            GroundTruth::Interaction => Some((1, 2)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub data: Dataset,
    pub truth: GroundTruth,
    pub noise_std: f64,
}

fn synth(n: usize, seed: u64, noise_std: f64, truth: GroundTruth) -> Result<SyntheticData> {
    if n == 0 {
        return Err(Error::ConfigInvalid("synthetic dataset needs N >= 1".into()));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::ConfigInvalid(format!("noise std {noise_std} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(4 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>());
        let eps: f64 = rng.sample(StandardNormal);
        y.push(truth.eval(&row) + noise_std * eps);
        x.extend_from_slice(&row);
    }
    let names = (1..=4).map(|i| format!("x{i}")).collect();
    let data = Dataset::new(Matrix::from_row_major(n, 4, x)?, y, names, Task::Regression)?;
    Ok(SyntheticData { data, truth, noise_std })
}

/// `x ~ U([0,1]⁴)`, `y = Σ_d f̂_d(x_d) + noise_std · ε`.
pub fn synth_toy(n: usize, seed: u64, noise_std: f64) -> Result<SyntheticData> {
    synth(n, seed, noise_std, GroundTruth::Toy)
}

/// `x ~ U([0,1]⁴)`, `y = f̂₁(x₁) + 3 x₂ x₃ + noise_std · ε` (default noise 0.5).
pub fn synth_interaction(n: usize, seed: u64, noise_std: f64) -> Result<SyntheticData> {
    synth(n, seed, noise_std, GroundTruth::Interaction)
}

pub const TOY_NOISE_STD: f64 = 1.0;
pub const INTERACTION_NOISE_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldSpec {
    /// `(train, test)` indices for fold `i`.
    pub fn split(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let test = self.folds[i].clone();
        let mut train: Vec<usize> =
            self.folds.iter().enumerate().filter(|&(j, _)| j != i).flat_map(|(_, f)| f.iter().copied()).collect();
        train.sort_unstable();
        (train, test)
    }
}

/// Shuffled folds whose sizes differ by at most one; depends only on `(n, k, seed)`.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<FoldSpec> {
    if k < 2 {
        return Err(Error::ConfigInvalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::KTooLarge { k, available: n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, idx) in perm.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSpec { k, seed, folds })
}

//! Predictive metrics, cross-validation and retention tables.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data_io::{kfold, standardize, Dataset, Standardization, Task};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::laplace::{fit_posterior, predictive_variance, Posterior};
use crate::model::{train_map, AdditiveModel, LikelihoodSpec, TrainConfig};
use crate::numerics::{mean, normal_cdf, sigmoid};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a} predictions for {b} targets")));
    }
    Ok(())
}

/// Mean Gaussian NLL with predictive variances `vars` (observation noise included).
pub fn gaussian_nll(means: &[f64], vars: &[f64], y: &[f64]) -> Result<f64> {
    check_len(means.len(), y.len())?;
    check_len(vars.len(), y.len())?;
    let total: f64 =
        means.iter().zip(vars).zip(y).map(|((&m, &v), &t)| 0.5 * (LN_2PI + v.ln()) + 0.5 * (t - m).powi(2) / v).sum();
    Ok(total / y.len() as f64)
}

/// Mean Bernoulli NLL of probabilities `probs`.
pub fn bernoulli_nll(probs: &[f64], y: &[f64]) -> Result<f64> {
    check_len(probs.len(), y.len())?;
    let total: f64 = probs
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(1e-300, 1.0 - 1e-16);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// How a latent Gaussian is turned into a class probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassPredictive {
    #[default]
    Probit,
    PlugIn,
}

impl ClassPredictive {
    pub fn probability(self, mean: f64, var: f64) -> f64 {
        match self {
            ClassPredictive::Probit => sigmoid(mean / (1.0 + std::f64::consts::PI * var / 8.0).sqrt()),
            ClassPredictive::PlugIn => sigmoid(mean),
        }
    }
}

pub fn rmse(means: &[f64], y: &[f64]) -> Result<f64> {
    check_len(means.len(), y.len())?;
    Ok((means.iter().zip(y).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

fn split_classes(scores: &[f64], labels: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(scores.len(), labels.len())?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1.0).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1.0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Mid-ranks (1-based), ties sharing their average rank.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney statistic with mid-rank tie correction.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = split_classes(scores, labels)?;
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1.0).map(|(r, _)| r).sum();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Step-wise average precision; tied scores enter as one threshold.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, _) = split_classes(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let total_pos = pos.len() as f64;
    let (mut tp, mut seen, mut area, mut prev_recall) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1.0 {
                tp += 1.0;
            }
            seen += 1.0;
            j += 1;
        }
        let recall = tp / total_pos;
        area += (recall - prev_recall) * (tp / seen);
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Equal-width-bin expected calibration error.
pub fn ece(probs: &[f64], labels: &[f64], bins: usize) -> Result<f64> {
    check_len(probs.len(), labels.len())?;
    if bins == 0 {
        return Err(Error::ConfigInvalid("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        acc[b] += y;
    }
    let n = probs.len() as f64;
    Ok((0..bins).filter(|&b| count[b] > 0).map(|b| (acc[b] - conf[b]).abs() / n).sum())
}

pub const ECE_BINS: usize = 10;

pub fn brier_root(probs: &[f64], labels: &[f64]) -> Result<f64> {
    rmse(probs, labels)
}

/// Nominal levels `0.05, 0.10, …, 0.95`.
pub fn quantile_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Mean absolute gap between each nominal level and the fraction of targets
/// below the corresponding Gaussian predictive quantile.
pub fn quantile_calibration(means: &[f64], stds: &[f64], y: &[f64]) -> Result<f64> {
    check_len(means.len(), y.len())?;
    check_len(stds.len(), y.len())?;
    let u: Vec<f64> = means
        .iter()
        .zip(stds)
        .zip(y)
        .map(|((&m, &s), &t)| if s == 0.0 && t == m { 0.5 } else { normal_cdf((t - m) / s) })
        .collect();
    let levels = quantile_levels();
    let n = y.len() as f64;
    Ok(levels.iter().map(|&q| (q - u.iter().filter(|&&v| v <= q).count() as f64 / n).abs()).sum::<f64>()
        / levels.len() as f64)
}

/// Predictions on one dataset, in original target units for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub latent_mean: Vec<f64>,
    pub latent_var: Vec<f64>,
    /// Observation noise variance, original units (regression only).
    pub noise_var: Option<f64>,
}

/// Linearized predictive for every row of `data` (already standardised like
/// the training data). Regression means/variances are mapped back through
/// `target` when given.
pub fn predict(
    m: &AdditiveModel,
    posterior: &Posterior,
    data: &Dataset,
    target: Option<&Standardization>,
    exec: Execution,
) -> Result<Predictions> {
    posterior.check_fresh(m)?;
    let mut latent_mean = m.predict_latent_with(&data.x, exec)?;
    let mut latent_var =
        exec::map_indices(exec, data.len(), |n| predictive_variance(m, posterior, data.x.row(n)).map(|v| v.total))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
    let mut noise_var = m.likelihood().sigma2();
    if let (Some(s), LikelihoodSpec::Gaussian { .. }) = (target, m.likelihood()) {
        let scale = s.target_scale();
        latent_mean.iter_mut().for_each(|v| *v = s.target_to_original(*v));
        latent_var.iter_mut().for_each(|v| *v *= scale * scale);
        noise_var = noise_var.map(|v| v * scale * scale);
    }
    Ok(Predictions { latent_mean, latent_var, noise_var })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub nll: f64,
    pub rmse: Option<f64>,
    pub quantile_calib: Option<f64>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub brier_root: Option<f64>,
    pub ece: Option<f64>,
}

/// Metrics of `pred` against targets `y` (original units for regression).
pub fn fold_metrics(task: Task, pred: &Predictions, y: &[f64], class: ClassPredictive) -> Result<FoldMetrics> {
    match task {
        Task::Regression => {
            let noise = pred.noise_var.unwrap_or(0.0);
            let vars: Vec<f64> = pred.latent_var.iter().map(|v| v + noise).collect();
            let stds: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
            Ok(FoldMetrics {
                nll: gaussian_nll(&pred.latent_mean, &vars, y)?,
                rmse: Some(rmse(&pred.latent_mean, y)?),
                quantile_calib: Some(quantile_calibration(&pred.latent_mean, &stds, y)?),
                ..Default::default()
            })
        }
        Task::Classification => {
            let probs: Vec<f64> =
                pred.latent_mean.iter().zip(&pred.latent_var).map(|(&m, &v)| class.probability(m, v)).collect();
            Ok(FoldMetrics {
                nll: bernoulli_nll(&probs, y)?,
                auroc: auroc(&probs, y).ok(),
                auprc: auprc(&probs, y).ok(),
                brier_root: Some(brier_root(&probs, y)?),
                ece: Some(ece(&probs, y, ECE_BINS)?),
                ..Default::default()
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation over folds divided by `√folds`.
    pub se: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let k = values.len() as f64;
        let mu = mean(values);
        let se = if values.len() > 1 {
            (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
        } else {
            0.0
        };
        Self { mean: mu, se }
    }
}

type MetricGetter = fn(&FoldMetrics) -> Option<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub folds: Vec<FoldMetrics>,
    pub aggregate: Vec<(String, Aggregate)>,
}

impl MetricReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let fields: [(&str, MetricGetter); 7] = [
            ("nll", |f| Some(f.nll)),
            ("rmse", |f| f.rmse),
            ("quantile_calib", |f| f.quantile_calib),
            ("auroc", |f| f.auroc),
            ("auprc", |f| f.auprc),
            ("brier_root", |f| f.brier_root),
            ("ece", |f| f.ece),
        ];
        let aggregate = fields
            .iter()
            .filter_map(|(name, get)| {
                let vals: Vec<f64> = folds.iter().filter_map(get).collect();
                (vals.len() == folds.len() && !vals.is_empty()).then(|| (name.to_string(), Aggregate::of(&vals)))
            })
            .collect();
        Self { folds, aggregate }
    }

    pub fn get(&self, name: &str) -> Option<Aggregate> {
        self.aggregate.iter().find(|(n, _)| n == name).map(|(_, a)| *a)
    }

    /// `metric  mean ± se` lines.
    pub fn write_table(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{:<16}{:>14}{:>14}", "metric", "mean", "std.err")?;
        for (name, a) in &self.aggregate {
            writeln!(out, "{:<16}{:>14.6}{:>14.6}", name, a.mean, a.se)?;
        }
        Ok(())
    }
}

/// What is evaluated in each fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evaluated {
    #[default]
    Model,
    /// Training-mean predictor with training-variance noise (regression) or base rate.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: usize,
    pub seed: u64,
    pub hidden: usize,
    pub class_predictive: ClassPredictive,
    pub evaluated: Evaluated,
}

/// Constant predictor fitted on `train`, evaluated on `test` (both raw).
pub fn constant_predictions(train: &Dataset, test: &Dataset) -> Predictions {
    let mu = mean(&train.y);
    match train.task {
        Task::Regression => {
            let var = train.y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / train.len() as f64;
            Predictions { latent_mean: vec![mu; test.len()], latent_var: vec![0.0; test.len()], noise_var: Some(var) }
        }
        Task::Classification => {
            let rate = mu.clamp(1e-12, 1.0 - 1e-12);
            let logit = (rate / (1.0 - rate)).ln();
            Predictions { latent_mean: vec![logit; test.len()], latent_var: vec![0.0; test.len()], noise_var: None }
        }
    }
}

/// K-fold evaluation: standardise on each training split, train, fit the
/// posterior and score the held-out split.
pub fn cross_validate(raw: &Dataset, cv: &CrossValidation, train_cfg: &TrainConfig) -> Result<MetricReport> {
    let spec = kfold(raw.len(), cv.folds, cv.seed)?;
    let mut folds = Vec::with_capacity(cv.folds);
    for i in 0..cv.folds {
        let (train_idx, test_idx) = spec.split(i);
        let train_raw = raw.subset(&train_idx);
        let test_raw = raw.subset(&test_idx);
        let pred = match cv.evaluated {
            Evaluated::Constant => constant_predictions(&train_raw, &test_raw),
            Evaluated::Model => {
                let (train, stats) = standardize(&train_raw)?;
                let test = stats.apply(&test_raw)?;
                let init = AdditiveModel::for_data(&train, cv.hidden, train_cfg.seed)?;
                let (m, _) = train_map(&init, &train, train_cfg)?;
                let post = fit_posterior(&m, &train.x, &train_cfg.curvature, train_cfg.execution)?;
                predict(&m, &post, &test, Some(&stats), train_cfg.execution)?
            }
        };
        folds.push(fold_metrics(raw.task, &pred, &test_raw.y, cv.class_predictive)?);
    }
    Ok(MetricReport::from_folds(folds))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub retained_fraction: f64,
    pub n: usize,
    /// Accuracy (classification) or RMSE (regression) on the retained samples.
    pub metric: f64,
}

/// Samples ordered from most to least confident, metric on each retained prefix.
/// Confidence is `max(p, 1 − p)` for classification and low predictive std for regression.
pub fn retention_table(
    task: Task,
    pred: &Predictions,
    y: &[f64],
    class: ClassPredictive,
    steps: usize,
) -> Result<Vec<RetentionRow>> {
    check_len(pred.latent_mean.len(), y.len())?;
    let n = y.len();
    let noise = pred.noise_var.unwrap_or(0.0);
    let mut order: Vec<usize> = (0..n).collect();
    let (confidence, correct): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| match task {
            Task::Classification => {
                let p = class.probability(pred.latent_mean[i], pred.latent_var[i]);
                let hit = ((p >= 0.5) as u8 as f64 == y[i]) as u8 as f64;
                (p.max(1.0 - p), hit)
            }
            Task::Regression => (-(pred.latent_var[i] + noise).sqrt(), (pred.latent_mean[i] - y[i]).powi(2)),
        })
        .unzip();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    Ok((1..=steps)
        .filter_map(|s| {
            let k = ((s as f64 / steps as f64) * n as f64).round() as usize;
            (k > 0).then(|| {
                let m = order[..k].iter().map(|&i| correct[i]).sum::<f64>() / k as f64;
                let metric = if task == Task::Regression { m.sqrt() } else { m };
                RetentionRow { retained_fraction: k as f64 / n as f64, n: k, metric }
            })
        })
        .collect())
}

pub fn write_retention_csv(rows: &[RetentionRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "retained_fraction,n,metric")?;
    for r in rows {
        writeln!(out, "{:.17e},{},{:.17e}", r.retained_fraction, r.n, r.metric)?;
    }
    Ok(())
}

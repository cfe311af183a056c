use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use lanam::data_io::{self, load_csv, standardize, SyntheticData, INTERACTION_NOISE_STD, TOY_NOISE_STD};
use lanam::evaluate::{self, CrossValidation, MetricReport};
use lanam::interaction::{self, InteractionScore};
use lanam::model::{train_lr_sweep, LR_SWEEP};
use lanam::{fit_posterior, train_map, AdditiveModel, Dataset, Error, Posterior, Result, Standardization};
use serde::Serialize;

use crate::config::{RunConfig, SynthKind};

pub const GRID_POINTS: usize = 256;
pub const RETENTION_STEPS: usize = 20;

fn create(cfg: &RunConfig, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(cfg.out.join(name))?))
}

fn write_json(cfg: &RunConfig, name: &str, value: &impl Serialize) -> Result<()> {
    let mut w = create(cfg, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::ConfigInvalid(format!("missing --{flag}")))
}

fn raw_data(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    load_csv(path, &cfg.target, cfg.task)
}

/// The model plus `path`'s data mapped into the model's input space.
fn model_and_data(cfg: &RunConfig, path: &Path) -> Result<(AdditiveModel, Dataset)> {
    let m = AdditiveModel::load(required(&cfg.model, "model")?)?;
    if m.likelihood().task() != cfg.task {
        return Err(Error::ConfigInvalid(format!(
            "model was trained for {:?} but --task is {:?}",
            m.likelihood().task(),
            cfg.task
        )));
    }
    let raw = raw_data(cfg, path)?;
    let data = match m.standardization() {
        Some(s) => s.apply(&raw)?,
        None => raw,
    };
    if data.num_features() != m.num_features() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} features, model expects {}",
            data.num_features(),
            m.num_features()
        )));
    }
    Ok((m, data))
}

fn posterior(cfg: &RunConfig, m: &AdditiveModel, data: &Dataset) -> Result<Posterior> {
    fit_posterior(m, &data.x, &cfg.train.curvature, cfg.train.execution)
}

fn network_names(m: &AdditiveModel, features: &[String]) -> Vec<String> {
    let joint = m.joint_nets().iter().map(|j| {
        let (a, b) = j.pair();
        format!("{}__{}", features[a], features[b])
    });
    features.iter().cloned().chain(joint).collect()
}

fn write_training_log(cfg: &RunConfig, hist: &lanam::model::TrainHistory, names: &[String]) -> Result<()> {
    let mut w = create(cfg, "training_log.csv")?;
    write!(w, "epoch,loss,marglik,sigma2")?;
    for n in names {
        write!(w, ",lambda_{n}")?;
    }
    writeln!(w)?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
    for r in &hist.epochs {
        write!(w, "{},{:.17e},{},{}", r.epoch, r.loss, opt(r.marglik), opt(r.sigma2))?;
        for l in &r.lambdas {
            write!(w, ",{l:.17e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn save_trained(cfg: &RunConfig, m: &AdditiveModel, hist: &lanam::model::TrainHistory, data: &Dataset) -> Result<()> {
    m.save(cfg.out.join("model.json"))?;
    write_training_log(cfg, hist, &network_names(m, &data.feature_names))?;
    if cfg.export_posterior {
        write_json(cfg, "posterior.json", &posterior(cfg, m, data)?)?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let raw = raw_data(cfg, required(&cfg.data, "data")?)?;
    let (data, stats) = standardize(&raw)?;
    let mut init = AdditiveModel::for_data(&data, cfg.hidden, cfg.seed)?;
    init.set_standardization(Some(stats));
    let (m, hist) = if cfg.lr_sweep {
        let (m, h, lr) = train_lr_sweep(&init, &data, &cfg.train, &LR_SWEEP)?;
        println!("selected learning rate {lr}");
        (m, h)
    } else {
        train_map(&init, &data, &cfg.train)?
    };
    save_trained(cfg, &m, &hist, &data)?;
    if let Some(b) = hist.best_marglik {
        println!("log marginal likelihood bound {b:.6}");
    }
    Ok(())
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn explain(cfg: &RunConfig) -> Result<()> {
    let (m, data) = model_and_data(cfg, required(&cfg.data, "data")?)?;
    let post = posterior(cfg, &m, &data)?;
    let stats: Option<&Standardization> = m.standardization();
    for d in 0..m.num_features() {
        let col = data.column(d);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grid(lo, hi, GRID_POINTS);
        let (means, vars) = m.centered_curve(&post, d, &g, &data)?;
        let mut w = create(cfg, &format!("curve_{}.csv", data.feature_names[d]))?;
        writeln!(w, "grid,mean,std")?;
        for ((x, mu), v) in g.iter().zip(&means).zip(&vars) {
            let x = stats.map_or(*x, |s| s.columns[d].inverse(*x));
            writeln!(w, "{x:.17e},{mu:.17e},{:.17e}", v.max(0.0).sqrt())?;
        }
        w.flush()?;
    }

    let names = network_names(&m, &data.feature_names);
    let mut w = create(cfg, "local.csv")?;
    write!(w, "row")?;
    for n in &names {
        write!(w, ",contrib_{n},std_{n},omitted_{n}")?;
    }
    writeln!(w, ",intercept,prediction")?;
    for i in 0..data.len() {
        let row = data.x.row(i);
        let contrib = m.contributions(row);
        let var = lanam::laplace::predictive_variance(&m, &post, row)?;
        write!(w, "{i}")?;
        for (c, v) in contrib.iter().zip(&var.per_network) {
            let s = v.max(0.0).sqrt();
            let omitted = (c.abs() <= 2.0 * s) as u8;
            write!(w, ",{c:.17e},{s:.17e},{omitted}")?;
        }
        writeln!(w, ",{:.17e},{:.17e}", m.intercept(), m.predict_row(row))?;
    }
    w.flush()?;
    Ok(())
}

fn scores(cfg: &RunConfig, m: &AdditiveModel, data: &Dataset) -> Result<Vec<InteractionScore>> {
    let post = posterior(cfg, m, data)?;
    interaction::score_pairs(m, data, &post, cfg.scorer, cfg.train.execution)
}

pub fn interactions(cfg: &RunConfig) -> Result<()> {
    let (m, data) = model_and_data(cfg, required(&cfg.data, "data")?)?;
    let s = scores(cfg, &m, &data)?;
    if let Some(k) = cfg.k_interactions {
        let top = interaction::select_top_k(&s, k, cfg.scorer)?;
        for (a, b) in top {
            println!("{a}:{b}\t{}\t{}", data.feature_names[a], data.feature_names[b]);
        }
    }
    let mut w = create(cfg, "interactions.csv")?;
    interaction::write_scores_csv(&s, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<()> {
    let (m, data) = model_and_data(cfg, required(&cfg.data, "data")?)?;
    let pairs = if cfg.pairs.is_empty() {
        let k = cfg.k_interactions.unwrap_or(0);
        interaction::select_top_k(&scores(cfg, &m, &data)?, k, cfg.scorer)?
    } else {
        cfg.pairs.clone()
    };
    let (m2, hist) = interaction::finetune_with_interactions(&m, &data, &pairs, cfg.joint_hidden, &cfg.train)?;
    save_trained(cfg, &m2, &hist, &data)?;
    for (a, b) in pairs {
        println!("added {a}:{b}");
    }
    Ok(())
}

fn write_report(cfg: &RunConfig, report: &MetricReport) -> Result<()> {
    write_json(cfg, "metrics.json", report)?;
    let mut w = create(cfg, "metrics_folds.csv")?;
    writeln!(w, "fold,nll,rmse,quantile_calib,auroc,auprc,brier_root,ece")?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
    for (i, f) in report.folds.iter().enumerate() {
        writeln!(
            w,
            "{i},{:.17e},{},{},{},{},{},{}",
            f.nll,
            opt(f.rmse),
            opt(f.quantile_calib),
            opt(f.auroc),
            opt(f.auprc),
            opt(f.brier_root),
            opt(f.ece)
        )?;
    }
    w.flush()?;
    report.write_table(std::io::stdout().lock())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let data_path = required(&cfg.data, "data")?;
    if cfg.model.is_some() {
        let (m, fit) = model_and_data(cfg, required(&cfg.fit_data, "fit-data")?)?;
        let test_raw = raw_data(cfg, data_path)?;
        let test = match m.standardization() {
            Some(s) => s.apply(&test_raw)?,
            None => test_raw.clone(),
        };
        let post = posterior(cfg, &m, &fit)?;
        let pred = evaluate::predict(&m, &post, &test, m.standardization(), cfg.train.execution)?;
        let fold = evaluate::fold_metrics(cfg.task, &pred, &test_raw.y, cfg.class_predictive)?;
        let rows = evaluate::retention_table(cfg.task, &pred, &test_raw.y, cfg.class_predictive, RETENTION_STEPS)?;
        let mut w = create(cfg, "retention.csv")?;
        evaluate::write_retention_csv(&rows, &mut w)?;
        w.flush()?;
        return write_report(cfg, &MetricReport::from_folds(vec![fold]));
    }
    let raw = raw_data(cfg, data_path)?;
    let cv = CrossValidation {
        folds: cfg.folds,
        seed: cfg.seed,
        hidden: cfg.hidden,
        class_predictive: cfg.class_predictive,
        evaluated: cfg.evaluated,
    };
    write_report(cfg, &evaluate::cross_validate(&raw, &cv, &cfg.train)?)
}

#[derive(Serialize)]
struct TruthFile {
    kind: data_io::GroundTruth,
    n: usize,
    seed: u64,
    noise_std: f64,
    /// 0-based column indices.
    interacting_pair: Option<(usize, usize)>,
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let SyntheticData { data, truth, noise_std } = match cfg.synth_kind {
        SynthKind::Toy => data_io::synth_toy(cfg.n, cfg.seed, cfg.noise_std.unwrap_or(TOY_NOISE_STD))?,
        SynthKind::Interaction => {
            data_io::synth_interaction(cfg.n, cfg.seed, cfg.noise_std.unwrap_or(INTERACTION_NOISE_STD))?
        }
    };
    let mut w = create(cfg, "data.csv")?;
    data_io::write_csv(&data, &cfg.target, &mut w)?;
    w.flush()?;
    let file =
        TruthFile { kind: truth, n: cfg.n, seed: cfg.seed, noise_std, interacting_pair: truth.interacting_pair() };
    write_json(cfg, "truth.json", &file)
}

//! Resolved run configuration: defaults, then an optional config file, then flags.

use std::path::{Path, PathBuf};

use lanam::evaluate::{ClassPredictive, Evaluated};
use lanam::interaction::Scorer;
use lanam::laplace::CurvatureKind;
use lanam::{Error, Execution, Result, Task, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::args::{Command, CommonArgs, TrainArgs};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Toy,
    Interaction,
}

/// Everything a command needs; written next to its outputs for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    /// Dataset the posterior is fitted on when evaluating a saved model.
    pub fit_data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub target: String,
    pub task: Task,
    pub seed: u64,
    pub out: PathBuf,
    pub hidden: usize,
    pub joint_hidden: usize,
    pub train: TrainConfig,
    pub lr_sweep: bool,
    pub export_posterior: bool,
    pub k_interactions: Option<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub scorer: Scorer,
    pub folds: usize,
    pub class_predictive: ClassPredictive,
    pub evaluated: Evaluated,
    pub synth_kind: SynthKind,
    pub n: usize,
    pub noise_std: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            data: None,
            fit_data: None,
            model: None,
            target: "y".into(),
            task: Task::Regression,
            seed: 0,
            out: PathBuf::from("."),
            hidden: lanam::feature_net::DEFAULT_HIDDEN,
            joint_hidden: lanam::model::DEFAULT_JOINT_HIDDEN,
            train: TrainConfig::default(),
            lr_sweep: false,
            export_posterior: false,
            k_interactions: None,
            pairs: Vec::new(),
            scorer: Scorer::Mi,
            folds: 5,
            class_predictive: ClassPredictive::Probit,
            evaluated: Evaluated::Model,
            synth_kind: SynthKind::Toy,
            n: 1000,
            noise_std: None,
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|p| {
            let (a, b) =
                p.split_once(':').ok_or_else(|| Error::ConfigInvalid(format!("pair {p:?} is not of the form d:d'")))?;
            let parse = |s: &str| {
                s.trim().parse::<usize>().map_err(|_| Error::ConfigInvalid(format!("bad feature index {s:?}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn resolve(cmd: &Command) -> Result<Self> {
        let common = cmd.common();
        let mut cfg = match &common.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.command = cmd.name().to_string();
        cfg.apply_common(common)?;
        if let Some(t) = cmd.train_args() {
            cfg.apply_train(t)?;
        }
        match cmd {
            Command::Train { .. } => {}
            Command::Explain { .. } => {}
            Command::Interactions { k, scorer, .. } => {
                set(&mut cfg.k_interactions, k.map(Some));
                set(&mut cfg.scorer, scorer.as_deref().map(str::parse).transpose()?);
            }
            Command::Finetune { k, scorer, pairs, joint_hidden, .. } => {
                set(&mut cfg.k_interactions, k.map(Some));
                set(&mut cfg.scorer, scorer.as_deref().map(str::parse).transpose()?);
                set(&mut cfg.pairs, pairs.as_deref().map(parse_pairs).transpose()?);
                set(&mut cfg.joint_hidden, *joint_hidden);
            }
            Command::Eval { folds, baseline, plug_in, fit_data, .. } => {
                set(&mut cfg.folds, *folds);
                if *baseline {
                    cfg.evaluated = Evaluated::Constant;
                }
                if *plug_in {
                    cfg.class_predictive = ClassPredictive::PlugIn;
                }
                set(&mut cfg.fit_data, fit_data.clone().map(Some));
            }
            Command::Synth { kind, n, noise_std, .. } => {
                set(&mut cfg.synth_kind, *kind);
                set(&mut cfg.n, *n);
                set(&mut cfg.noise_std, noise_std.map(Some));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_common(&mut self, c: &CommonArgs) -> Result<()> {
        set(&mut self.data, c.data.clone().map(Some));
        set(&mut self.model, c.model.clone().map(Some));
        set(&mut self.target, c.target.clone());
        set(&mut self.task, c.task.as_deref().map(str::parse).transpose()?);
        set(&mut self.seed, c.seed);
        set(&mut self.out, c.out.clone());
        self.train.seed = self.seed;
        Ok(())
    }

    fn apply_train(&mut self, t: &TrainArgs) -> Result<()> {
        let tc = &mut self.train;
        set(&mut tc.max_epochs, t.epochs);
        set(&mut tc.lr_params, t.lr);
        set(&mut tc.lr_hyper, t.lr_hyper);
        set(&mut tc.hyper_every, t.hyper_every);
        set(&mut tc.hyper_steps, t.hyper_steps);
        set(&mut tc.batch_size, t.batch_size);
        set(&mut tc.early_stop_patience, t.patience);
        if let Some(kind) = &t.curvature {
            tc.curvature.kind = match kind.as_str() {
                "dense" => CurvatureKind::Dense,
                "kfac" => CurvatureKind::Kfac,
                other => return Err(Error::ConfigInvalid(format!("unknown curvature {other:?} (dense, kfac)"))),
            };
        }
        if t.sequential {
            tc.execution = Execution::Sequential;
        }
        if t.fixed_noise {
            tc.optimize_noise = false;
        }
        set(&mut self.hidden, t.hidden);
        self.lr_sweep |= t.lr_sweep;
        self.export_posterior |= t.export_posterior;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.hidden == 0 || self.joint_hidden == 0 {
            return Err(Error::ConfigInvalid("hidden width must be positive".into()));
        }
        let needs_data = !matches!(self.command.as_str(), "synth");
        if needs_data && self.data.is_none() {
            return Err(Error::ConfigInvalid(format!("{} requires --data", self.command)));
        }
        let needs_model = matches!(self.command.as_str(), "explain" | "interactions" | "finetune");
        if needs_model && self.model.is_none() {
            return Err(Error::ConfigInvalid(format!("{} requires --model", self.command)));
        }
        if self.command == "eval" && self.model.is_some() && self.fit_data.is_none() {
            return Err(Error::ConfigInvalid("eval --model also requires --fit-data".into()));
        }
        if self.command == "finetune" && self.pairs.is_empty() && self.k_interactions.is_none() {
            return Err(Error::ConfigInvalid("finetune requires --pairs or --k".into()));
        }
        Ok(())
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(RUN_CONFIG_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_parse() {
        assert_eq!(parse_pairs("1:2, 0:3").unwrap(), vec![(1, 2), (0, 3)]);
        assert!(parse_pairs("1-2").is_err());
        assert!(parse_pairs("").unwrap().is_empty());
    }

    #[test]
    fn config_round_trip() {
        let cfg = RunConfig { command: "train".into(), seed: 4, ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}

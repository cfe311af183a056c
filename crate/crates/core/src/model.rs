//! The additive model, its likelihoods and the alternating MAP / evidence training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, Standardization, Task};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::feature_net::{gather, FeatureNetwork, JointFeatureNetwork, Subnetwork, DEFAULT_HIDDEN};
use crate::laplace::{self, CurvatureConfig, FixedFit, Posterior, LAMBDA_MAX, LAMBDA_MIN};
use crate::numerics::{dot, log_sigmoid, mean, sigmoid, Matrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SIGMA2_MIN: f64 = 1e-6;
const SIGMA2_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LikelihoodSpec {
    Gaussian { sigma2: f64 },
    Bernoulli,
}

impl LikelihoodSpec {
    pub fn task(&self) -> Task {
        match self {
            LikelihoodSpec::Gaussian { .. } => Task::Regression,
            LikelihoodSpec::Bernoulli => Task::Classification,
        }
    }

    pub fn sigma2(&self) -> Option<f64> {
        match *self {
            LikelihoodSpec::Gaussian { sigma2 } => Some(sigma2),
            LikelihoodSpec::Bernoulli => None,
        }
    }

    /// Scale `s` with `γ_n = s · w_n` (see [`laplace::curvature_weights`]).
    pub fn curvature_scale(&self) -> f64 {
        match *self {
            LikelihoodSpec::Gaussian { sigma2 } => 1.0 / sigma2,
            LikelihoodSpec::Bernoulli => 1.0,
        }
    }

    fn check_target(&self, row: usize, y: f64) -> Result<()> {
        let ok = match self {
            LikelihoodSpec::Gaussian { .. } => y.is_finite(),
            LikelihoodSpec::Bernoulli => y == 0.0 || y == 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidTarget { row, value: y })
        }
    }

    /// `log p(y | f)`.
    pub fn log_prob(&self, y: f64, f: f64) -> f64 {
        match *self {
            LikelihoodSpec::Gaussian { sigma2 } => -0.5 * (LN_2PI + sigma2.ln()) - 0.5 * (y - f).powi(2) / sigma2,
            LikelihoodSpec::Bernoulli => y * log_sigmoid(f) + (1.0 - y) * log_sigmoid(-f),
        }
    }

    /// `−∂ log p(y | f) / ∂f`.
    pub fn residual(&self, y: f64, f: f64) -> f64 {
        match *self {
            LikelihoodSpec::Gaussian { sigma2 } => (f - y) / sigma2,
            LikelihoodSpec::Bernoulli => sigmoid(f) - y,
        }
    }

    /// `γ = −∂² log p(y | f) / ∂f²`.
    pub fn curvature(&self, f: f64) -> f64 {
        match *self {
            LikelihoodSpec::Gaussian { sigma2 } => 1.0 / sigma2,
            LikelihoodSpec::Bernoulli => laplace::bernoulli_curvature(f),
        }
    }
}

/// `β₀ + Σ_d f_d(x_d) + Σ_{(d,d')} f_{d,d'}(x_d, x_d')` with one Gaussian prior
/// precision per network.
///
/// Every mutation bumps an internal version counter, which posteriors use to
/// detect that they are stale.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveModel {
    pub(crate) feature_nets: Vec<FeatureNetwork>,
    pub(crate) joint_nets: Vec<JointFeatureNetwork>,
    pub(crate) intercept: f64,
    /// Feature networks first, then joint networks.
    pub(crate) lambdas: Vec<f64>,
    pub(crate) likelihood: LikelihoodSpec,
    pub(crate) standardization: Option<Standardization>,
    version: u64,
}

impl AdditiveModel {
    /// He-initialised networks, `λ = 1`, zero intercept.
    pub fn new(num_features: usize, hidden: usize, likelihood: LikelihoodSpec, seed: u64) -> Result<Self> {
        if let LikelihoodSpec::Gaussian { sigma2 } = likelihood {
            if !(sigma2 > 0.0) || !sigma2.is_finite() {
                return Err(Error::ConfigInvalid(format!("σ² = {sigma2} must be finite and positive")));
            }
        }
        let feature_nets =
            (0..num_features).map(|d| FeatureNetwork::init(d, hidden, seed)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            feature_nets,
            joint_nets: Vec::new(),
            intercept: 0.0,
            lambdas: vec![1.0; num_features],
            likelihood,
            standardization: None,
            version: 0,
        })
    }

    /// Initialises for a (standardised) dataset: intercept at the target mean
    /// or base-rate logit, `σ²` at the empirical target variance.
    pub fn for_data(data: &Dataset, hidden: usize, seed: u64) -> Result<Self> {
        let likelihood = match data.task {
            Task::Regression => {
                let var = crate::data_io::ColumnStats::of(&data.y).std.powi(2);
                LikelihoodSpec::Gaussian { sigma2: if var > 0.0 { var } else { 1.0 } }
            }
            Task::Classification => LikelihoodSpec::Bernoulli,
        };
        let mut m = Self::new(data.num_features(), hidden, likelihood, seed)?;
        m.intercept = match data.task {
            Task::Regression => mean(&data.y),
            Task::Classification => {
                let rate = mean(&data.y).clamp(1e-6, 1.0 - 1e-6);
                (rate / (1.0 - rate)).ln()
            }
        };
        Ok(m)
    }

    pub fn from_parts(
        feature_nets: Vec<FeatureNetwork>,
        joint_nets: Vec<JointFeatureNetwork>,
        intercept: f64,
        lambdas: Vec<f64>,
        likelihood: LikelihoodSpec,
    ) -> Result<Self> {
        for (i, net) in feature_nets.iter().enumerate() {
            if net.feature() != i {
                return Err(Error::ConfigInvalid(format!("feature network {i} reads feature {}", net.feature())));
            }
        }
        let d = feature_nets.len();
        let mut seen = std::collections::BTreeSet::new();
        for j in &joint_nets {
            let (a, b) = j.pair();
            if b >= d {
                return Err(Error::IndexOutOfRange { index: b, len: d });
            }
            if !seen.insert((a, b)) {
                return Err(Error::DuplicatePair(a, b));
            }
        }
        if lambdas.len() != d + joint_nets.len() || lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::ConfigInvalid("one positive finite λ per network required".into()));
        }
        let mut m = Self::new(0, 1, likelihood, 0)?;
        m.feature_nets = feature_nets;
        m.joint_nets = joint_nets;
        m.intercept = intercept;
        m.lambdas = lambdas;
        Ok(m)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn touch(&mut self) {
        self.version += 1;
    }

    pub fn num_features(&self) -> usize {
        self.feature_nets.len()
    }

    pub fn num_networks(&self) -> usize {
        self.feature_nets.len() + self.joint_nets.len()
    }

    pub fn feature_nets(&self) -> &[FeatureNetwork] {
        &self.feature_nets
    }

    pub fn joint_nets(&self) -> &[JointFeatureNetwork] {
        &self.joint_nets
    }

    /// Feature networks followed by joint networks.
    pub fn networks(&self) -> Vec<&dyn Subnetwork> {
        let mut v: Vec<&dyn Subnetwork> = Vec::with_capacity(self.num_networks());
        v.extend(self.feature_nets.iter().map(|n| n as &dyn Subnetwork));
        v.extend(self.joint_nets.iter().map(|n| n as &dyn Subnetwork));
        v
    }

    fn network_mut(&mut self, i: usize) -> &mut dyn Subnetwork {
        let d = self.feature_nets.len();
        if i < d {
            &mut self.feature_nets[i]
        } else {
            &mut self.joint_nets[i - d]
        }
    }

    /// Mutable parameters of network `i` (feature networks first).
    pub fn network_params_mut(&mut self, i: usize) -> Result<&mut [f64]> {
        if i >= self.num_networks() {
            return Err(Error::IndexOutOfRange { index: i, len: self.num_networks() });
        }
        self.touch();
        Ok(self.network_mut(i).params_mut())
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn set_intercept(&mut self, b: f64) {
        self.intercept = b;
        self.touch();
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn set_lambdas(&mut self, lambdas: Vec<f64>) -> Result<()> {
        if lambdas.len() != self.num_networks() || lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::ConfigInvalid("one positive finite λ per network required".into()));
        }
        self.lambdas = lambdas;
        self.touch();
        Ok(())
    }

    pub fn likelihood(&self) -> LikelihoodSpec {
        self.likelihood
    }

    pub fn set_sigma2(&mut self, sigma2: f64) -> Result<()> {
        match &mut self.likelihood {
            LikelihoodSpec::Gaussian { sigma2: s } if sigma2 > 0.0 && sigma2.is_finite() => {
                *s = sigma2;
                self.touch();
                Ok(())
            }
            _ => Err(Error::ConfigInvalid(format!("cannot set σ² = {sigma2} on this likelihood"))),
        }
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn set_standardization(&mut self, s: Option<Standardization>) {
        self.standardization = s;
    }

    /// Appends a joint network for `(d, d')`, with the given prior precision.
    pub fn push_joint(&mut self, net: JointFeatureNetwork, lambda: f64) -> Result<()> {
        let (a, b) = net.pair();
        if b >= self.num_features() {
            return Err(Error::IndexOutOfRange { index: b, len: self.num_features() });
        }
        if self.joint_nets.iter().any(|j| j.pair() == (a, b)) {
            return Err(Error::DuplicatePair(a, b));
        }
        self.joint_nets.push(net);
        self.lambdas.push(lambda);
        self.touch();
        Ok(())
    }

    fn check_design(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.num_features() {
            return Err(Error::ShapeMismatch(format!(
                "design has {} columns, model has {} features",
                x.cols(),
                self.num_features()
            )));
        }
        Ok(())
    }

    /// Latent prediction for one design row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(2);
        let mut f = self.intercept;
        for net in self.networks() {
            gather(net.inputs(), row, &mut buf);
            f += net.eval(&buf);
        }
        f
    }

    /// Per-network contributions `f_i(x)` for one row, model order.
    pub fn contributions(&self, row: &[f64]) -> Vec<f64> {
        let mut buf = Vec::with_capacity(2);
        self.networks()
            .into_iter()
            .map(|net| {
                gather(net.inputs(), row, &mut buf);
                net.eval(&buf)
            })
            .collect()
    }

    pub fn predict_latent(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.predict_latent_with(x, Execution::Sequential)
    }

    pub fn predict_latent_with(&self, x: &Matrix, exec: Execution) -> Result<Vec<f64>> {
        self.check_design(x)?;
        Ok(exec::reduce_row_chunks(
            exec,
            x.rows(),
            |r| r.map(|n| self.predict_row(x.row(n))).collect::<Vec<_>>(),
            |mut a, b| {
                a.extend(b);
                a
            },
        )
        .unwrap_or_default())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        self.check_design(&data.x)?;
        for (i, &y) in data.y.iter().enumerate() {
            self.likelihood.check_target(i, y)?;
        }
        Ok(())
    }

    /// `Σ_n log p(y_n | f(x_n))`.
    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let f = self.predict_latent(&data.x)?;
        Ok(f.iter().zip(&data.y).map(|(&fi, &yi)| self.likelihood.log_prob(yi, fi)).sum())
    }

    /// `γ_n`: `1/σ²` for regression, `p_n (1 − p_n)` for classification.
    pub fn gamma_weights(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_data(data)?;
        let f = self.predict_latent(&data.x)?;
        Ok(f.iter().map(|&fi| self.likelihood.curvature(fi)).collect())
    }

    /// Gaussian log prior of all networks (the intercept has no prior).
    pub fn log_prior(&self) -> f64 {
        self.networks()
            .iter()
            .zip(&self.lambdas)
            .map(|(net, &l)| {
                let p = net.num_params() as f64;
                0.5 * p * (l.ln() - LN_2PI) - 0.5 * l * dot(net.params(), net.params())
            })
            .sum()
    }

    /// `log p(D | θ) + log p(θ | λ)`.
    pub fn log_joint(&self, data: &Dataset) -> Result<f64> {
        Ok(self.log_likelihood(data)? + self.log_prior())
    }

    /// Gradient of `−log_joint` restricted to `rows`, with the data term
    /// scaled by `data_scale`. Returns `(per-network gradients, intercept gradient)`.
    pub fn neg_log_joint_grad(
        &self,
        data: &Dataset,
        rows: &[usize],
        data_scale: f64,
        exec: Execution,
    ) -> (Vec<Vec<f64>>, f64) {
        let nets = self.networks();
        let residuals: Vec<f64> =
            rows.iter().map(|&n| self.likelihood.residual(data.y[n], self.predict_row(data.x.row(n)))).collect();
        let mut grads: Vec<Vec<f64>> = exec::map_indices(exec, nets.len(), |i| {
            let net = nets[i];
            let p = net.num_params();
            let mut g = vec![0.0; p];
            let mut jac = vec![0.0; p];
            let mut buf = Vec::with_capacity(2);
            for (k, &n) in rows.iter().enumerate() {
                gather(net.inputs(), data.x.row(n), &mut buf);
                net.eval_with_jacobian(&buf, &mut jac);
                let r = residuals[k] * data_scale;
                for (gi, ji) in g.iter_mut().zip(&jac) {
                    *gi += r * ji;
                }
            }
            g
        });
        for ((g, net), &l) in grads.iter_mut().zip(&nets).zip(&self.lambdas) {
            for (gi, &ti) in g.iter_mut().zip(net.params()) {
                *gi += l * ti;
            }
        }
        let intercept = residuals.iter().sum::<f64>() * data_scale;
        (grads, intercept)
    }

    /// `f̂_d(grid) = f_d(grid) − mean_n f_d(x_{n,d})` and its linearized
    /// variance (the shift does not change the variance).
    pub fn centered_curve(
        &self,
        posterior: &Posterior,
        d: usize,
        grid: &[f64],
        data: &Dataset,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        posterior.check_fresh(self)?;
        let net = self.feature_nets.get(d).ok_or(Error::IndexOutOfRange { index: d, len: self.num_features() })?;
        let offset = mean(&net.forward(&data.column(d)));
        let mut row = vec![0.0; self.num_features()];
        let block = &posterior.blocks[d];
        let mut means = Vec::with_capacity(grid.len());
        let mut vars = Vec::with_capacity(grid.len());
        for &g in grid {
            row[d] = g;
            means.push(net.forward_one(g) - offset);
            vars.push(block.variance(net, &row));
        }
        Ok((means, vars))
    }
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetRecord {
    d: usize,
    hidden: usize,
    params: Vec<f64>,
    lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JointRecord {
    pair: [usize; 2],
    hidden: usize,
    params: Vec<f64>,
    lambda: f64,
}

/// On-disk layout; floats use shortest round-trip decimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    #[serde(rename = "D")]
    num_features: usize,
    /// `"gaussian"` or `"bernoulli"`.
    likelihood: String,
    intercept: f64,
    standardization: Option<Standardization>,
    feature_nets: Vec<NetRecord>,
    joint_nets: Vec<JointRecord>,
    sigma2: Option<f64>,
}

impl AdditiveModel {
    pub fn to_json(&self) -> Result<String> {
        let n = self.num_features();
        let file = ModelFile {
            schema_version: SCHEMA_VERSION,
            num_features: n,
            likelihood: match self.likelihood {
                LikelihoodSpec::Gaussian { .. } => "gaussian".into(),
                LikelihoodSpec::Bernoulli => "bernoulli".into(),
            },
            intercept: self.intercept,
            standardization: self.standardization.clone(),
            feature_nets: self
                .feature_nets
                .iter()
                .zip(&self.lambdas)
                .map(|(net, &lambda)| NetRecord {
                    d: net.feature(),
                    hidden: net.hidden(),
                    params: net.params().to_vec(),
                    lambda,
                })
                .collect(),
            joint_nets: self
                .joint_nets
                .iter()
                .zip(&self.lambdas[n..])
                .map(|(net, &lambda)| JointRecord {
                    pair: [net.pair().0, net.pair().1],
                    hidden: net.hidden(),
                    params: net.params().to_vec(),
                    lambda,
                })
                .collect(),
            sigma2: self.likelihood.sigma2(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::ConfigInvalid(format!("unsupported schema_version {}", file.schema_version)));
        }
        if file.feature_nets.len() != file.num_features {
            return Err(Error::ShapeMismatch(format!(
                "D = {} but {} feature networks",
                file.num_features,
                file.feature_nets.len()
            )));
        }
        let likelihood = match (file.likelihood.as_str(), file.sigma2) {
            ("gaussian", Some(sigma2)) => LikelihoodSpec::Gaussian { sigma2 },
            ("bernoulli", None) => LikelihoodSpec::Bernoulli,
            (kind, _) => {
                return Err(Error::ConfigInvalid(format!("likelihood '{kind}' with sigma2 {:?}", file.sigma2)))
            }
        };
        let mut lambdas = Vec::new();
        let feature_nets = file
            .feature_nets
            .into_iter()
            .map(|r| {
                lambdas.push(r.lambda);
                FeatureNetwork::from_params(r.d, r.hidden, r.params)
            })
            .collect::<Result<Vec<_>>>()?;
        let joint_nets = file
            .joint_nets
            .into_iter()
            .map(|r| {
                lambdas.push(r.lambda);
                JointFeatureNetwork::from_params(r.pair[0], r.pair[1], r.hidden, r.params)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut m = Self::from_parts(feature_nets, joint_nets, file.intercept, lambdas, likelihood)?;
        m.standardization = file.standardization;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_params: f64,
    pub lr_hyper: f64,
    pub hyper_every: usize,
    pub hyper_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evidence refreshes without improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub optimize_noise: bool,
    pub curvature: CurvatureConfig,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_params: 0.01,
            lr_hyper: 0.1,
            hyper_every: 100,
            hyper_steps: 30,
            batch_size: 512,
            max_epochs: 8000,
            early_stop_patience: 20,
            seed: 0,
            optimize_noise: true,
            curvature: CurvatureConfig::default(),
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::ConfigInvalid(format!("{what} must be positive")));
        if !(self.lr_params > 0.0) {
            return bad("lr_params");
        }
        if !(self.lr_hyper > 0.0) {
            return bad("lr_hyper");
        }
        if self.hyper_every == 0 {
            return bad("hyper_every");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample `−log_joint` over the epoch's mini-batches.
    pub loss: f64,
    /// Evidence bound after the hyperparameter steps, on refresh epochs.
    pub marglik: Option<f64>,
    pub sigma2: Option<f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose snapshot was restored, if any refresh happened.
    pub best_epoch: Option<usize>,
    pub best_marglik: Option<f64>,
}

/// Adam with the usual `(0.9, 0.999)` moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(lr: f64, n: usize) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }

    /// Grows the state when new parameters are appended.
    fn resize(&mut self, n: usize) {
        self.m.resize(n, 0.0);
        self.v.resize(n, 0.0);
    }
}

fn flatten(m: &AdditiveModel) -> Vec<f64> {
    let mut v: Vec<f64> = m.networks().iter().flat_map(|n| n.params().iter().copied()).collect();
    v.push(m.intercept);
    v
}

fn unflatten(m: &mut AdditiveModel, flat: &[f64]) {
    let mut off = 0;
    for i in 0..m.num_networks() {
        let p = m.network_mut(i).params_mut();
        let n = p.len();
        p.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    m.intercept = flat[off];
    m.touch();
}

/// Hyperparameter state in log space.
struct HyperState {
    log_lambda: Vec<f64>,
    log_sigma2: Option<f64>,
    adam: Adam,
}

impl HyperState {
    fn new(m: &AdditiveModel, lr: f64, optimize_noise: bool) -> Self {
        let log_lambda: Vec<f64> = m.lambdas.iter().map(|l| l.ln()).collect();
        let log_sigma2 = if optimize_noise { m.likelihood.sigma2().map(f64::ln) } else { None };
        let n = log_lambda.len() + usize::from(log_sigma2.is_some());
        Self { log_lambda, log_sigma2, adam: Adam::new(lr, n) }
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.log_lambda.clone();
        v.extend(self.log_sigma2);
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let k = self.log_lambda.len();
        for (dst, &src) in self.log_lambda.iter_mut().zip(v) {
            *dst = src.clamp(LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
        }
        if let Some(s) = &mut self.log_sigma2 {
            *s = v[k].clamp(SIGMA2_MIN.ln(), SIGMA2_MAX.ln());
        }
    }

    fn apply(&self, m: &mut AdditiveModel) {
        m.lambdas = self.log_lambda.iter().map(|l| l.exp()).collect();
        if let (Some(s), LikelihoodSpec::Gaussian { sigma2 }) = (self.log_sigma2, &mut m.likelihood) {
            *sigma2 = s.exp();
        }
        m.touch();
    }
}

/// One evidence refresh: recompute curvature at the current θ and take
/// gradient-ascent steps on `log λ` (and `log σ²`). Returns the bound at the
/// final hyperparameters.
fn hyper_refresh(m: &mut AdditiveModel, data: &Dataset, cfg: &TrainConfig, hyper: &mut HyperState) -> Result<f64> {
    let exec = cfg.execution;
    let curv = laplace::model_curvatures(m, &data.x, &cfg.curvature, exec)?;
    let fixed = FixedFit::from_model(m, data)?;
    let sigma2_of = |h: &HyperState, m: &AdditiveModel| h.log_sigma2.map(f64::exp).or(m.likelihood.sigma2());
    for _ in 0..cfg.hyper_steps {
        let lambdas: Vec<f64> = hyper.log_lambda.iter().map(|l| l.exp()).collect();
        let (_, grad) =
            laplace::hyper_objective(&fixed, &curv, &lambdas, sigma2_of(hyper, m), &cfg.curvature.jitter, exec)?;
        let mut g: Vec<f64> = grad.log_lambda.iter().map(|v| -v).collect();
        if hyper.log_sigma2.is_some() {
            g.push(-grad.log_sigma2.unwrap_or(0.0));
        }
        let mut flat = hyper.flat();
        hyper.adam.step(&mut flat, &g);
        hyper.set_flat(&flat);
    }
    hyper.apply(m);
    let lambdas = m.lambdas.clone();
    let (bound, _) =
        laplace::hyper_objective(&fixed, &curv, &lambdas, m.likelihood.sigma2(), &cfg.curvature.jitter, exec)?;
    Ok(bound)
}

/// Alternates Adam on `−log_joint` over mini-batches with periodic evidence
/// refreshes, and restores the best-evidence snapshot at the end.
pub fn train_map(model: &AdditiveModel, data: &Dataset, cfg: &TrainConfig) -> Result<(AdditiveModel, TrainHistory)> {
    cfg.validate()?;
    model.check_data(data)?;
    let mut m = model.clone();
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 || data.is_empty() {
        return Ok((m, history));
    }
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7261_696e);
    let mut order: Vec<usize> = (0..n).collect();
    let mut flat = flatten(&m);
    let mut adam = Adam::new(cfg.lr_params, flat.len());
    adam.resize(flat.len());
    let mut hyper = HyperState::new(&m, cfg.lr_hyper, cfg.optimize_noise);
    let mut best: Option<(f64, AdditiveModel, usize)> = None;
    let mut stale_refreshes = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = n as f64 / batch.len() as f64;
            let (grads, g0) = m.neg_log_joint_grad(data, batch, scale, cfg.execution);
            let batch_nll: f64 =
                batch.iter().map(|&i| -m.likelihood.log_prob(data.y[i], m.predict_row(data.x.row(i)))).sum();
            let prior: f64 =
                m.networks().iter().zip(&m.lambdas).map(|(net, &l)| 0.5 * l * dot(net.params(), net.params())).sum();
            loss_sum += (batch_nll * scale + prior) * batch.len() as f64 / n as f64;
            let mut g: Vec<f64> = grads.into_iter().flatten().collect();
            g.push(g0);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut flat, &g);
            unflatten(&mut m, &flat);
        }
        let loss = loss_sum / n as f64;
        if !loss.is_finite() || flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch });
        }

        let mut record =
            EpochRecord { epoch, loss, marglik: None, sigma2: m.likelihood.sigma2(), lambdas: m.lambdas.clone() };
        if epoch % cfg.hyper_every == 0 {
            let bound = hyper_refresh(&mut m, data, cfg, &mut hyper)?;
            if !bound.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            record.marglik = Some(bound);
            record.sigma2 = m.likelihood.sigma2();
            record.lambdas = m.lambdas.clone();
            history.epochs.push(record);
            match &best {
                Some((b, _, _)) if bound <= *b => stale_refreshes += 1,
                _ => {
                    best = Some((bound, m.clone(), epoch));
                    stale_refreshes = 0;
                }
            }
            if stale_refreshes >= cfg.early_stop_patience {
                break;
            }
        } else {
            history.epochs.push(record);
        }
    }

    if let Some((bound, snapshot, epoch)) = best {
        m = snapshot;
        history.best_epoch = Some(epoch);
        history.best_marglik = Some(bound);
    }
    m.touch();
    Ok((m, history))
}

/// Trains once per learning rate and keeps the run with the highest final evidence.
pub fn train_lr_sweep(
    model: &AdditiveModel,
    data: &Dataset,
    cfg: &TrainConfig,
    rates: &[f64],
) -> Result<(AdditiveModel, TrainHistory, f64)> {
    let mut best: Option<(AdditiveModel, TrainHistory, f64, f64)> = None;
    for &lr in rates {
        let run_cfg = TrainConfig { lr_params: lr, ..cfg.clone() };
        let (m, h) = match train_map(model, data, &run_cfg) {
            Ok(r) => r,
            Err(Error::Diverged { .. }) => continue,
            Err(e) => return Err(e),
        };
        let score = h.best_marglik.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|b| score > b.3) {
            best = Some((m, h, lr, score));
        }
    }
    best.map(|(m, h, lr, _)| (m, h, lr))
        .ok_or_else(|| Error::ConfigInvalid("every learning rate in the sweep diverged".into()))
}

pub const LR_SWEEP: [f64; 3] = [0.1, 0.01, 0.001];

/// Appends zero-output joint networks for `pairs`, each with prior precision
/// at the mean of its parents' precisions.
pub fn append_joint_networks(m: &mut AdditiveModel, pairs: &[(usize, usize)], hidden: usize, seed: u64) -> Result<()> {
    for &(a, b) in pairs {
        let (a, b) = (a.min(b), a.max(b));
        if b >= m.num_features() {
            return Err(Error::IndexOutOfRange { index: b, len: m.num_features() });
        }
        let lambda = 0.5 * (m.lambdas[a] + m.lambdas[b]);
        m.push_joint(JointFeatureNetwork::init(a, b, hidden, seed)?, lambda)?;
    }
    Ok(())
}

pub const DEFAULT_JOINT_HIDDEN: usize = DEFAULT_HIDDEN;

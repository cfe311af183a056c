//! Block-diagonal linearized Laplace posterior.
//!
//! Each network `d` gets an independent Gaussian block with precision
//! `s · Σ_n w_n J_nᵀ J_n + λ_d I`, where `s · w_n = γ_n` is the negative second
//! derivative of the log-likelihood (for regression `w_n = 1`, `s = 1/σ²`; for
//! classification `w_n = p_n(1 − p_n)`, `s = 1`). Keeping `s` separate lets the
//! hyperparameter loop move `σ²` without recomputing Jacobians.
//!
//! The evidence lower bound is
//!
//! ```text
//! log q(D | λ) = log p(D, θ* | λ) + ½ Σ_d [ P_d log 2π − log |precision_d| ]
//!              = log p(D | θ*) + Σ_d [ ½ P_d log λ_d − ½ λ_d ‖θ_d‖² − ½ log |precision_d| ]
//! ```
//!
//! and its derivative in `λ_d` is `½ (P_d / λ_d − ‖θ_d‖² − tr Σ_d)` for dense blocks.

pub mod kfac;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::feature_net::{gather, jacobian, Subnetwork};
use crate::model::{AdditiveModel, LikelihoodSpec};
use crate::numerics::{cholesky, dot, CholeskyFactor, Matrix, SymMatrix, DEFAULT_JITTER};

pub use kfac::{kron_curvature, KronFactors, KroneckerPair};

/// λ is kept inside this range by every update rule.
pub const LAMBDA_MIN: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureKind {
    #[default]
    Dense,
    Kfac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureConfig {
    pub kind: CurvatureKind,
    /// Dense blocks larger than this fall back to KFAC.
    pub dense_limit: usize,
    pub jitter: Vec<f64>,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        Self { kind: CurvatureKind::Dense, dense_limit: 2048, jitter: DEFAULT_JITTER.to_vec() }
    }
}

impl CurvatureConfig {
    pub fn kfac() -> Self {
        Self { kind: CurvatureKind::Kfac, ..Self::default() }
    }

    fn resolve(&self, net: &dyn Subnetwork) -> CurvatureKind {
        match self.kind {
            CurvatureKind::Dense if net.num_params() > self.dense_limit && net.layer_sizes().is_some() => {
                CurvatureKind::Kfac
            }
            CurvatureKind::Kfac if net.layer_sizes().is_none() => CurvatureKind::Dense,
            k => k,
        }
    }
}

/// Unscaled curvature `Σ_n w_n J_nᵀ J_n` of one network.
#[derive(Debug, Clone, PartialEq)]
pub enum Curvature {
    Dense(SymMatrix),
    Kron(Vec<KronFactors>),
}

/// Curvature plus everything else a block needs that does not depend on hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureBlock {
    pub index: usize,
    pub num_params: usize,
    pub theta_norm_sq: f64,
    pub curvature: Curvature,
}

/// `Σ_n w_n J_nᵀ J_n`, accumulated in fixed row chunks.
pub fn dense_curvature(net: &dyn Subnetwork, x: &Matrix, weights: &[f64], exec: Execution) -> SymMatrix {
    let p = net.num_params();
    let acc = exec::reduce_row_chunks(
        exec,
        x.rows(),
        |range| {
            let mut m = SymMatrix::zeros(p);
            let mut jac = vec![0.0; p];
            let mut buf = Vec::new();
            for n in range {
                gather(net.inputs(), x.row(n), &mut buf);
                net.eval_with_jacobian(&buf, &mut jac);
                m.add_outer(weights[n], &jac);
            }
            m
        },
        |mut a, b| {
            a.add_assign(&b);
            a
        },
    );
    let mut m = acc.unwrap_or_else(|| SymMatrix::zeros(p));
    m.symmetrize_from_upper();
    m
}

pub fn curvature_block(
    index: usize,
    net: &dyn Subnetwork,
    x: &Matrix,
    weights: &[f64],
    cfg: &CurvatureConfig,
    exec: Execution,
) -> Result<CurvatureBlock> {
    let curvature = match cfg.resolve(net) {
        CurvatureKind::Dense => Curvature::Dense(dense_curvature(net, x, weights, exec)),
        CurvatureKind::Kfac => Curvature::Kron(kron_curvature(net, x, weights)?),
    };
    Ok(CurvatureBlock {
        index,
        num_params: net.num_params(),
        theta_norm_sq: dot(net.params(), net.params()),
        curvature,
    })
}

/// Covariance representation of a fitted block.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockCov {
    /// Cholesky factor of the precision.
    Dense {
        precision_chol: CholeskyFactor,
    },
    Kron {
        layers: Vec<KroneckerPair>,
    },
}

/// Gaussian posterior block `Σ_d` of one network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorBlock {
    pub index: usize,
    pub num_params: usize,
    pub lambda_used: f64,
    pub scale_used: f64,
    pub theta_norm_sq: f64,
    pub precision_logdet: f64,
    pub trace_cov: f64,
    #[serde(skip)]
    dlogdet_dlambda: f64,
    #[serde(skip)]
    dlogdet_dlogscale: f64,
    pub cov: BlockCov,
}

impl PosteriorBlock {
    pub fn build(block: &CurvatureBlock, scale: f64, lambda: f64, jitter: &[f64]) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::ConfigInvalid(format!("prior precision {lambda} must be positive")));
        }
        let p = block.num_params as f64;
        let (cov, logdet, trace, dl, ds) = match &block.curvature {
            Curvature::Dense(c) => {
                let chol = cholesky(&c.scaled_plus_diagonal(scale, lambda), jitter)?;
                let trace = chol.inverse_trace();
                let logdet = chol.logdet();
                (BlockCov::Dense { precision_chol: chol }, logdet, trace, trace, p - lambda * trace)
            }
            Curvature::Kron(factors) => {
                let layers =
                    factors.iter().map(|f| KroneckerPair::new(f, scale, lambda, jitter)).collect::<Result<Vec<_>>>()?;
                let logdet = layers.iter().map(KroneckerPair::precision_logdet).sum();
                let trace = layers.iter().map(KroneckerPair::trace_cov).sum();
                let dl = layers.iter().map(KroneckerPair::dlogdet_dlambda).sum();
                let ds = layers.iter().map(KroneckerPair::dlogdet_dlogscale).sum();
                (BlockCov::Kron { layers }, logdet, trace, dl, ds)
            }
        };
        Ok(Self {
            index: block.index,
            num_params: block.num_params,
            lambda_used: lambda,
            scale_used: scale,
            theta_norm_sq: block.theta_norm_sq,
            precision_logdet: logdet,
            trace_cov: trace,
            dlogdet_dlambda: dl,
            dlogdet_dlogscale: ds,
            cov,
        })
    }

    /// `log |Σ_d|`.
    pub fn cov_logdet(&self) -> f64 {
        -self.precision_logdet
    }

    pub fn is_kfac(&self) -> bool {
        matches!(self.cov, BlockCov::Kron { .. })
    }

    /// Dense `Σ_d`; KFAC blocks are expanded.
    pub fn covariance(&self) -> SymMatrix {
        match &self.cov {
            BlockCov::Dense { precision_chol } => precision_chol.inverse(),
            BlockCov::Kron { .. } => panic!("covariance() expands dense blocks only"),
        }
    }

    /// This block's term of the evidence bound, excluding the likelihood.
    pub fn bound_term(&self) -> f64 {
        0.5 * self.num_params as f64 * self.lambda_used.ln()
            - 0.5 * self.lambda_used * self.theta_norm_sq
            - 0.5 * self.precision_logdet
    }

    /// `∂ bound / ∂ log λ_d`.
    pub fn grad_log_lambda(&self) -> f64 {
        let l = self.lambda_used;
        l * 0.5 * (self.num_params as f64 / l - self.theta_norm_sq - self.dlogdet_dlambda)
    }

    /// `∂ (−½ log|precision|) / ∂ log σ²`, where the curvature scale is `1/σ²`.
    pub fn grad_log_sigma2(&self) -> f64 {
        0.5 * self.dlogdet_dlogscale
    }

    /// Effective number of parameters `P − λ tr Σ`.
    pub fn effective_params(&self) -> f64 {
        self.num_params as f64 - self.lambda_used * self.trace_cov
    }

    /// `J(x*) Σ_d J(x*)ᵀ` for this block's network at one design row.
    pub fn variance(&self, net: &dyn Subnetwork, row: &[f64]) -> f64 {
        let mut buf = Vec::new();
        gather(net.inputs(), row, &mut buf);
        match &self.cov {
            BlockCov::Dense { precision_chol } => {
                let mut jac = vec![0.0; net.num_params()];
                net.eval_with_jacobian(&buf, &mut jac);
                precision_chol.inv_quad_form(&jac)
            }
            BlockCov::Kron { layers } => {
                let terms = net.layer_terms(&buf).expect("KFAC block on layered network");
                layers.iter().zip(&terms).map(|(l, t)| l.variance(t)).sum()
            }
        }
    }
}

/// Dense block from explicit GGN weights `gamma`.
pub fn fit_block(net: &dyn Subnetwork, x: &Matrix, gamma: &[f64], lambda: f64) -> Result<PosteriorBlock> {
    check_rows(x, gamma)?;
    let cb = curvature_block(
        0,
        net,
        x,
        gamma,
        &CurvatureConfig { dense_limit: usize::MAX, ..Default::default() },
        Execution::Sequential,
    )?;
    PosteriorBlock::build(&cb, 1.0, lambda, &DEFAULT_JITTER)
}

/// Kronecker-factored block from explicit GGN weights.
pub fn fit_block_kfac(net: &dyn Subnetwork, x: &Matrix, gamma: &[f64], lambda: f64) -> Result<PosteriorBlock> {
    check_rows(x, gamma)?;
    let cb = curvature_block(0, net, x, gamma, &CurvatureConfig::kfac(), Execution::Sequential)?;
    PosteriorBlock::build(&cb, 1.0, lambda, &DEFAULT_JITTER)
}

fn check_rows(x: &Matrix, gamma: &[f64]) -> Result<()> {
    if x.rows() != gamma.len() {
        return Err(Error::ShapeMismatch(format!("{} rows but {} curvature weights", x.rows(), gamma.len())));
    }
    Ok(())
}

/// Evidence bound from a log-likelihood value and fitted blocks.
pub fn bound_from_blocks(log_lik: f64, blocks: &[PosteriorBlock]) -> f64 {
    log_lik + blocks.iter().map(PosteriorBlock::bound_term).sum::<f64>()
}

/// Sample weights and curvature scale such that `γ_n = scale · w_n`.
pub fn curvature_weights(m: &AdditiveModel, x: &Matrix) -> Result<(Vec<f64>, f64)> {
    match m.likelihood {
        LikelihoodSpec::Gaussian { sigma2 } => Ok((vec![1.0; x.rows()], 1.0 / sigma2)),
        LikelihoodSpec::Bernoulli => {
            let f = m.predict_latent(x)?;
            Ok((f.iter().map(|&fi| bernoulli_curvature(fi)).collect(), 1.0))
        }
    }
}

pub(crate) fn bernoulli_curvature(f: f64) -> f64 {
    let p = crate::numerics::sigmoid(f);
    // p(1-p) underflows to zero for |f| > ~745; keep it strictly positive
    (p * (1.0 - p)).max(f64::MIN_POSITIVE)
}

/// Curvature for every network of the model, in model order.
pub fn model_curvatures(
    m: &AdditiveModel,
    x: &Matrix,
    cfg: &CurvatureConfig,
    exec: Execution,
) -> Result<Vec<CurvatureBlock>> {
    let (weights, _) = curvature_weights(m, x)?;
    let nets = m.networks();
    exec::map_indices(exec, nets.len(), |i| curvature_block(i, nets[i], x, &weights, cfg, Execution::Sequential))
        .into_iter()
        .collect()
}

/// Builds one block per curvature with the given precisions and scale.
pub fn build_blocks(
    curvatures: &[CurvatureBlock],
    lambdas: &[f64],
    scale: f64,
    jitter: &[f64],
    exec: Execution,
) -> Result<Vec<PosteriorBlock>> {
    if curvatures.len() != lambdas.len() {
        return Err(Error::ShapeMismatch(format!("{} blocks but {} precisions", curvatures.len(), lambdas.len())));
    }
    exec::map_indices(exec, curvatures.len(), |i| PosteriorBlock::build(&curvatures[i], scale, lambdas[i], jitter))
        .into_iter()
        .collect()
}

/// The block-diagonal posterior of a model, stamped with the model version it was fitted at.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Posterior {
    pub blocks: Vec<PosteriorBlock>,
    pub model_version: u64,
}

impl Posterior {
    pub fn check_fresh(&self, m: &AdditiveModel) -> Result<()> {
        if self.model_version != m.version() || self.blocks.len() != m.num_networks() {
            return Err(Error::StalePosterior { posterior: self.model_version, model: m.version() });
        }
        Ok(())
    }
}

/// Fits every block at the model's current parameters and hyperparameters.
pub fn fit_posterior(m: &AdditiveModel, x: &Matrix, cfg: &CurvatureConfig, exec: Execution) -> Result<Posterior> {
    let curv = model_curvatures(m, x, cfg, exec)?;
    let blocks = build_blocks(&curv, &m.lambdas, m.likelihood.curvature_scale(), &cfg.jitter, exec)?;
    Ok(Posterior { blocks, model_version: m.version() })
}

pub fn log_marglik_bound(m: &AdditiveModel, data: &crate::data_io::Dataset, posterior: &Posterior) -> Result<f64> {
    posterior.check_fresh(m)?;
    Ok(bound_from_blocks(m.log_likelihood(data)?, &posterior.blocks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarglikGrad {
    /// `∂/∂ log λ_d`, one per network.
    pub log_lambda: Vec<f64>,
    /// `∂/∂ log σ²` for Gaussian likelihoods.
    pub log_sigma2: Option<f64>,
}

/// Gradient of the regression log-likelihood term in `log σ²`.
pub(crate) fn gaussian_loglik_grad_log_sigma2(n: usize, rss: f64, sigma2: f64) -> f64 {
    -0.5 * n as f64 + 0.5 * rss / sigma2
}

pub fn marglik_grad(m: &AdditiveModel, data: &crate::data_io::Dataset, posterior: &Posterior) -> Result<MarglikGrad> {
    posterior.check_fresh(m)?;
    let log_lambda = posterior.blocks.iter().map(PosteriorBlock::grad_log_lambda).collect();
    let log_sigma2 = match m.likelihood {
        LikelihoodSpec::Gaussian { sigma2 } => {
            let f = m.predict_latent(&data.x)?;
            let rss: f64 = f.iter().zip(&data.y).map(|(a, b)| (a - b).powi(2)).sum();
            let curv: f64 = posterior.blocks.iter().map(PosteriorBlock::grad_log_sigma2).sum();
            Some(gaussian_loglik_grad_log_sigma2(data.len(), rss, sigma2) + curv)
        }
        LikelihoodSpec::Bernoulli => None,
    };
    Ok(MarglikGrad { log_lambda, log_sigma2 })
}

/// Closed-form fixed-point update for one block: `(P − λ tr Σ) / ‖θ‖²`, clipped.
pub fn mackay_lambda(block: &PosteriorBlock) -> Result<f64> {
    if block.theta_norm_sq < 1e-12 {
        return Err(Error::DegenerateParameters { index: block.index, norm_sq: block.theta_norm_sq });
    }
    Ok((block.effective_params() / block.theta_norm_sq).clamp(LAMBDA_MIN, LAMBDA_MAX))
}

/// Closed-form update for every network; degenerate networks are frozen at [`LAMBDA_MAX`].
pub fn mackay_update(posterior: &Posterior, m: &AdditiveModel) -> Result<Vec<f64>> {
    posterior.check_fresh(m)?;
    Ok(posterior
        .blocks
        .iter()
        .map(|b| match mackay_lambda(b) {
            Ok(l) => l,
            Err(_) => LAMBDA_MAX,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveVariance {
    pub total: f64,
    pub per_network: Vec<f64>,
}

/// Linearized predictive variance at one (standardised) design row.
pub fn predictive_variance(m: &AdditiveModel, posterior: &Posterior, row: &[f64]) -> Result<PredictiveVariance> {
    posterior.check_fresh(m)?;
    if row.len() != m.num_features() {
        return Err(Error::ShapeMismatch(format!("row of {} values for {} features", row.len(), m.num_features())));
    }
    let per_network: Vec<f64> =
        m.networks().into_iter().zip(&posterior.blocks).map(|(net, b)| b.variance(net, row)).collect();
    Ok(PredictiveVariance { total: per_network.iter().sum(), per_network })
}

/// Log-likelihood-independent pieces held fixed during hyperparameter steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixedFit {
    Gaussian { n: usize, rss: f64 },
    Bernoulli { log_lik: f64 },
}

impl FixedFit {
    pub fn from_model(m: &AdditiveModel, data: &crate::data_io::Dataset) -> Result<Self> {
        Ok(match m.likelihood {
            LikelihoodSpec::Gaussian { .. } => {
                let f = m.predict_latent(&data.x)?;
                let rss = f.iter().zip(&data.y).map(|(a, b)| (a - b).powi(2)).sum();
                FixedFit::Gaussian { n: data.len(), rss }
            }
            LikelihoodSpec::Bernoulli => FixedFit::Bernoulli { log_lik: m.log_likelihood(data)? },
        })
    }

    pub fn log_lik(&self, sigma2: f64) -> f64 {
        match *self {
            FixedFit::Gaussian { n, rss } => -0.5 * n as f64 * (LN_2PI + sigma2.ln()) - 0.5 * rss / sigma2,
            FixedFit::Bernoulli { log_lik } => log_lik,
        }
    }
}

/// Bound and gradient at hyperparameters `(λ, σ²)` with θ and curvature fixed.
pub fn hyper_objective(
    fixed: &FixedFit,
    curvatures: &[CurvatureBlock],
    lambdas: &[f64],
    sigma2: Option<f64>,
    jitter: &[f64],
    exec: Execution,
) -> Result<(f64, MarglikGrad)> {
    let s2 = sigma2.unwrap_or(1.0);
    let scale = match fixed {
        FixedFit::Gaussian { .. } => 1.0 / s2,
        FixedFit::Bernoulli { .. } => 1.0,
    };
    let blocks = build_blocks(curvatures, lambdas, scale, jitter, exec)?;
    let bound = bound_from_blocks(fixed.log_lik(s2), &blocks);
    let log_lambda = blocks.iter().map(PosteriorBlock::grad_log_lambda).collect();
    let log_sigma2 = match fixed {
        FixedFit::Gaussian { n, rss } => Some(
            gaussian_loglik_grad_log_sigma2(*n, *rss, s2)
                + blocks.iter().map(PosteriorBlock::grad_log_sigma2).sum::<f64>(),
        ),
        FixedFit::Bernoulli { .. } => None,
    };
    Ok((bound, MarglikGrad { log_lambda, log_sigma2 }))
}

/// Dense Jacobian of a network over a design matrix (convenience re-export).
pub fn network_jacobian(net: &dyn Subnetwork, x: &Matrix) -> Matrix {
    jacobian(net, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_net::FeatureNetwork;

    /// `f(x) = θ x`, the smallest linear-in-parameters network.
    struct Scalar {
        input: [usize; 1],
        theta: [f64; 1],
    }

    impl Subnetwork for Scalar {
        fn inputs(&self) -> &[usize] {
            &self.input
        }
        fn params(&self) -> &[f64] {
            &self.theta
        }
        fn params_mut(&mut self) -> &mut [f64] {
            &mut self.theta
        }
        fn eval(&self, input: &[f64]) -> f64 {
            self.theta[0] * input[0]
        }
        fn eval_with_jacobian(&self, input: &[f64], jac: &mut [f64]) -> f64 {
            jac[0] = input[0];
            self.eval(input)
        }
    }

    #[test]
    fn prior_only_block() {
        let net = FeatureNetwork::init(0, 3, 1).unwrap();
        let b = fit_block(&net, &Matrix::zeros(0, 1), &[], 4.0).unwrap();
        let cov = b.covariance();
        for i in 0..10 {
            for j in 0..10 {
                let want = if i == j { 0.25 } else { 0.0 };
                assert!((cov.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scalar_block_and_variance() {
        let net = Scalar { input: [0], theta: [0.5] };
        let b = fit_block(&net, &Matrix::column(&[1.0]), &[1.0], 1.0).unwrap();
        assert!((b.covariance().get(0, 0) - 0.5).abs() < 1e-15);
        assert!((b.variance(&net, &[2.0]) - 2.0).abs() < 1e-15);
        // P=1, tr Σ=0.5, λ=1, ‖θ‖²=0.25 → λ_new = 2
        assert!((mackay_lambda(&b).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn prior_only_gradient_and_mackay() {
        let mut net = FeatureNetwork::init(0, 2, 3).unwrap();
        let norm: f64 = dot(net.params(), net.params());
        let lambda = 3.0;
        let b = fit_block(&net, &Matrix::zeros(0, 1), &[], lambda).unwrap();
        assert!((b.grad_log_lambda() + 0.5 * lambda * norm).abs() < 1e-12);
        assert_eq!(mackay_lambda(&b).unwrap(), LAMBDA_MIN);
        assert!(b.bound_term().is_finite());

        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let z = fit_block(&net, &Matrix::zeros(0, 1), &[], lambda).unwrap();
        assert!(z.grad_log_lambda().abs() < 1e-12);
        assert!(z.bound_term().abs() < 1e-12);
        assert!(matches!(mackay_lambda(&z), Err(Error::DegenerateParameters { .. })));
    }

    #[test]
    fn mackay_fixed_point() {
        // choose θ so that the gradient vanishes: ‖θ‖² = P/λ − tr Σ
        let x = Matrix::column(&[0.3, -1.2, 2.0]);
        let gamma = [1.0, 0.5, 2.0];
        let lambda = 0.7;
        let probe = Scalar { input: [0], theta: [1.0] };
        let b = fit_block(&probe, &x, &gamma, lambda).unwrap();
        let target = 1.0 / lambda - b.trace_cov;
        let net = Scalar { input: [0], theta: [target.sqrt()] };
        let b = fit_block(&net, &x, &gamma, lambda).unwrap();
        assert!(b.grad_log_lambda().abs() < 1e-12);
        assert!((mackay_lambda(&b).unwrap() - lambda).abs() < 1e-12);
    }
}

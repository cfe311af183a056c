//! Ranking candidate feature pairs for joint networks and the second training stage.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::feature_net::{jacobian, Subnetwork};
use crate::laplace::Posterior;
use crate::model::{append_joint_networks, train_map, AdditiveModel, TrainConfig, TrainHistory};
use crate::numerics::{cholesky, Matrix, SymMatrix, DEFAULT_JITTER};

/// Prior precision of the output multipliers in the last-layer posterior.
pub const LAMBDA_LAST: f64 = 1.0;

const RHO_MAX: f64 = 1.0 - 1e-12;

/// Joint Gaussian over one scalar output multiplier per feature network.
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerPosterior {
    pub cov: SymMatrix,
    /// Features whose network output is numerically zero on the data.
    pub degenerate: Vec<usize>,
    pub model_version: u64,
}

impl LastLayerPosterior {
    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.cov.diag()
    }

    pub fn correlation(&self, a: usize, b: usize) -> f64 {
        self.cov.get(a, b) / (self.cov.get(a, a) * self.cov.get(b, b)).sqrt()
    }
}

/// `[Φᵀ diag(γ) Φ + λ_last I]⁻¹` with `Φ_{n,d} = f_d(x_{n,d})`.
pub fn fit_last_layer(m: &AdditiveModel, data: &Dataset) -> Result<LastLayerPosterior> {
    fit_last_layer_with(m, data, LAMBDA_LAST)
}

pub fn fit_last_layer_with(m: &AdditiveModel, data: &Dataset, lambda_last: f64) -> Result<LastLayerPosterior> {
    if !(lambda_last > 0.0) {
        return Err(Error::ConfigInvalid(format!("λ_last = {lambda_last} must be positive")));
    }
    let gamma = m.gamma_weights(data)?;
    let d = m.num_features();
    let phi: Vec<Vec<f64>> = m.feature_nets().iter().map(|net| net.forward(&data.column(net.feature()))).collect();
    let precision = SymMatrix::from_upper_fn(d, |a, b| {
        let s: f64 = (0..data.len()).map(|n| gamma[n] * phi[a][n] * phi[b][n]).sum();
        if a == b {
            s + lambda_last
        } else {
            s
        }
    });
    let degenerate =
        phi.iter().enumerate().filter(|(_, col)| col.iter().all(|v| v.abs() < 1e-12)).map(|(i, _)| i).collect();
    let cov = cholesky(&precision, &DEFAULT_JITTER)?.inverse();
    Ok(LastLayerPosterior { cov, degenerate, model_version: m.version() })
}

/// `½ log(1 / (1 − ρ²))` with `|ρ|` clipped below one.
pub fn mi_from_correlation(rho: f64) -> f64 {
    let r = rho.clamp(-RHO_MAX, RHO_MAX);
    -0.5 * (1.0 - r * r).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionScore {
    /// `(d, d')` with `d < d'`.
    pub pair: (usize, usize),
    pub mi: f64,
    pub gain: Option<f64>,
    /// 1-based rank under the scorer used for selection; 0 until ranked.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    #[default]
    Mi,
    Gain,
    MiBlockwise,
}

impl FromStr for Scorer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mi" => Ok(Scorer::Mi),
            "gain" => Ok(Scorer::Gain),
            "mi-blockwise" => Ok(Scorer::MiBlockwise),
            _ => Err(Error::ConfigInvalid(format!("unknown scorer '{s}' (mi, gain, mi-blockwise)"))),
        }
    }
}

fn all_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|a| (a + 1..d).map(move |b| (a, b))).collect()
}

/// Last-layer MI for every pair, lexicographic order.
pub fn mi_scores(llp: &LastLayerPosterior) -> Vec<InteractionScore> {
    all_pairs(llp.dim())
        .into_iter()
        .map(|(a, b)| InteractionScore {
            pair: (a, b),
            mi: mi_from_correlation(llp.correlation(a, b)),
            gain: None,
            rank: 0,
        })
        .collect()
}

/// Precision over the concatenated parameters of two networks:
/// `s · [J_a J_b]ᵀ diag(w) [J_a J_b] + diag(λ_a I, λ_b I)`.
pub fn pair_precision(
    ja: &Matrix,
    jb: &Matrix,
    weights: &[f64],
    scale: f64,
    lambda_a: f64,
    lambda_b: f64,
) -> Result<SymMatrix> {
    if ja.rows() != jb.rows() || ja.rows() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "Jacobians with {} and {} rows, {} weights",
            ja.rows(),
            jb.rows(),
            weights.len()
        )));
    }
    let (pa, pb) = (ja.cols(), jb.cols());
    let stacked = Matrix::from_fn(ja.rows(), pa + pb, |n, i| {
        let w = (scale * weights[n]).sqrt();
        if i < pa {
            w * ja.get(n, i)
        } else {
            w * jb.get(n, i - pa)
        }
    });
    let mut ggn = SymMatrix::zeros(pa + pb);
    for n in 0..stacked.rows() {
        ggn.add_outer(1.0, stacked.row(n));
    }
    ggn.symmetrize_from_upper();
    Ok(SymMatrix::from_upper_fn(pa + pb, |r, c| {
        let v = ggn.get(r, c);
        match (r == c, r < pa) {
            (true, true) => v + lambda_a,
            (true, false) => v + lambda_b,
            _ => v,
        }
    }))
}

/// `½ [log|Σ_a| + log|Σ_b| − log|Σ_ab|]` from marginal blocks of the joint covariance.
pub fn mi_from_joint_precision(precision: &SymMatrix, pa: usize) -> Result<f64> {
    let chol = cholesky(precision, &DEFAULT_JITTER)?;
    let cov = chol.inverse();
    let dim = precision.dim();
    let ia: Vec<usize> = (0..pa).collect();
    let ib: Vec<usize> = (pa..dim).collect();
    let la = cholesky(&cov.submatrix(&ia), &DEFAULT_JITTER)?.logdet();
    let lb = cholesky(&cov.submatrix(&ib), &DEFAULT_JITTER)?.logdet();
    Ok((0.5 * (la + lb + chol.logdet())).max(0.0))
}

/// `log|P_a| + log|P_b| − log|P_ab|` with `P_a`, `P_b` the diagonal blocks of the joint precision.
pub fn gain_from_joint_precision(precision: &SymMatrix, pa: usize) -> Result<f64> {
    let dim = precision.dim();
    let ia: Vec<usize> = (0..pa).collect();
    let ib: Vec<usize> = (pa..dim).collect();
    let la = cholesky(&precision.submatrix(&ia), &DEFAULT_JITTER)?.logdet();
    let lb = cholesky(&precision.submatrix(&ib), &DEFAULT_JITTER)?.logdet();
    let lab = cholesky(precision, &DEFAULT_JITTER)?.logdet();
    Ok(la + lb - lab)
}

/// Blockwise MI between two networks' full parameter posteriors, fitted jointly
/// with the GGN cross-block included.
pub fn mi_blockwise_from_jacobians(
    ja: &Matrix,
    jb: &Matrix,
    weights: &[f64],
    scale: f64,
    lambda_a: f64,
    lambda_b: f64,
) -> Result<f64> {
    mi_from_joint_precision(&pair_precision(ja, jb, weights, scale, lambda_a, lambda_b)?, ja.cols())
}

fn check_pair(m: &AdditiveModel, (a, b): (usize, usize)) -> Result<(usize, usize)> {
    let d = m.num_features();
    for i in [a, b] {
        if i >= d {
            return Err(Error::IndexOutOfRange { index: i, len: d });
        }
    }
    if a == b {
        return Err(Error::DuplicatePair(a, b));
    }
    Ok((a.min(b), a.max(b)))
}

struct PairContext {
    jacobians: Vec<Matrix>,
    weights: Vec<f64>,
    scale: f64,
}

fn pair_context(m: &AdditiveModel, data: &Dataset, features: &[usize]) -> Result<PairContext> {
    let (weights, scale) = crate::laplace::curvature_weights(m, &data.x)?;
    let nets = m.feature_nets();
    let jacobians = features.iter().map(|&d| jacobian(&nets[d] as &dyn Subnetwork, &data.x)).collect();
    Ok(PairContext { jacobians, weights, scale })
}

/// Blockwise MI for one pair at the model's current λ.
pub fn mi_scores_blockwise(m: &AdditiveModel, data: &Dataset, pair: (usize, usize)) -> Result<f64> {
    let (a, b) = check_pair(m, pair)?;
    let ctx = pair_context(m, data, &[a, b])?;
    let l = m.lambdas();
    mi_blockwise_from_jacobians(&ctx.jacobians[0], &ctx.jacobians[1], &ctx.weights, ctx.scale, l[a], l[b])
}

/// Blockwise MI for every feature pair.
pub fn mi_scores_blockwise_all(m: &AdditiveModel, data: &Dataset, exec: Execution) -> Result<Vec<InteractionScore>> {
    joint_scores(m, data, exec, |p, pa| Ok((mi_from_joint_precision(p, pa)?, None)))
}

/// Evidence gain for every feature pair from joint precisions at the posterior's λ.
pub fn gain_scores(
    m: &AdditiveModel,
    data: &Dataset,
    posterior: &Posterior,
    exec: Execution,
) -> Result<Vec<InteractionScore>> {
    posterior.check_fresh(m)?;
    joint_scores(m, data, exec, |p, pa| {
        let gain = gain_from_joint_precision(p, pa)?;
        Ok((0.5 * gain.max(0.0), Some(gain)))
    })
}

fn joint_scores(
    m: &AdditiveModel,
    data: &Dataset,
    exec: Execution,
    score: impl Fn(&SymMatrix, usize) -> Result<(f64, Option<f64>)> + Sync,
) -> Result<Vec<InteractionScore>> {
    let d = m.num_features();
    let features: Vec<usize> = (0..d).collect();
    let ctx = pair_context(m, data, &features)?;
    let pairs = all_pairs(d);
    let lambdas = m.lambdas();
    exec::map_slice(exec, &pairs, |&(a, b)| {
        let p = pair_precision(&ctx.jacobians[a], &ctx.jacobians[b], &ctx.weights, ctx.scale, lambdas[a], lambdas[b])?;
        let (mi, gain) = score(&p, ctx.jacobians[a].cols())?;
        Ok(InteractionScore { pair: (a, b), mi, gain, rank: 0 })
    })
    .into_iter()
    .collect()
}

/// Scalar gain from the last-layer precision: `−log(1 − ρ²)` of each 2×2 sub-block.
pub fn gain_scores_last_layer(m: &AdditiveModel, data: &Dataset) -> Result<Vec<InteractionScore>> {
    let llp = fit_last_layer(m, data)?;
    let precision = cholesky(&llp.cov, &DEFAULT_JITTER)?.inverse();
    Ok(all_pairs(llp.dim())
        .into_iter()
        .map(|(a, b)| {
            let sub = precision.submatrix(&[a, b]);
            let gain =
                sub.get(0, 0).ln() + sub.get(1, 1).ln() - (sub.get(0, 0) * sub.get(1, 1) - sub.get(0, 1).powi(2)).ln();
            InteractionScore { pair: (a, b), mi: mi_from_correlation(llp.correlation(a, b)), gain: Some(gain), rank: 0 }
        })
        .collect())
}

fn key(s: &InteractionScore, scorer: Scorer) -> f64 {
    match scorer {
        Scorer::Gain => s.gain.unwrap_or(f64::NEG_INFINITY),
        Scorer::Mi | Scorer::MiBlockwise => s.mi,
    }
}

/// Sorts by descending score (ties lexicographic by pair) and assigns 1-based ranks.
pub fn rank_scores(scores: &mut [InteractionScore], scorer: Scorer) {
    scores.sort_by(|x, y| key(y, scorer).total_cmp(&key(x, scorer)).then(x.pair.cmp(&y.pair)));
    for (i, s) in scores.iter_mut().enumerate() {
        s.rank = i + 1;
    }
}

pub fn select_top_k(scores: &[InteractionScore], k: usize, scorer: Scorer) -> Result<Vec<(usize, usize)>> {
    if k > scores.len() {
        return Err(Error::KTooLarge { k, available: scores.len() });
    }
    let mut sorted = scores.to_vec();
    rank_scores(&mut sorted, scorer);
    Ok(sorted.into_iter().take(k).map(|s| s.pair).collect())
}

/// Scores every pair with the chosen scorer and ranks them.
pub fn score_pairs(
    m: &AdditiveModel,
    data: &Dataset,
    posterior: &Posterior,
    scorer: Scorer,
    exec: Execution,
) -> Result<Vec<InteractionScore>> {
    let mut scores = match scorer {
        Scorer::Mi => mi_scores(&fit_last_layer(m, data)?),
        Scorer::Gain => gain_scores(m, data, posterior, exec)?,
        Scorer::MiBlockwise => mi_scores_blockwise_all(m, data, exec)?,
    };
    rank_scores(&mut scores, scorer);
    Ok(scores)
}

/// Appends a zero-output joint network per pair and retrains everything.
pub fn finetune_with_interactions(
    m: &AdditiveModel,
    data: &Dataset,
    pairs: &[(usize, usize)],
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(AdditiveModel, TrainHistory)> {
    let mut seen = std::collections::BTreeSet::new();
    for &p in pairs {
        let p = check_pair(m, p)?;
        if !seen.insert(p) {
            return Err(Error::DuplicatePair(p.0, p.1));
        }
    }
    let mut stage2 = m.clone();
    append_joint_networks(&mut stage2, pairs, hidden, cfg.seed)?;
    train_map(&stage2, data, cfg)
}

/// CSV with header `pair_d,pair_dprime,mi,gain,rank`; a missing gain is left empty.
pub fn write_scores_csv(scores: &[InteractionScore], mut out: impl Write) -> Result<()> {
    writeln!(out, "pair_d,pair_dprime,mi,gain,rank")?;
    for s in scores {
        let gain = s.gain.map(|g| format!("{g:.17e}")).unwrap_or_default();
        writeln!(out, "{},{},{:.17e},{},{}", s.pair.0, s.pair.1, s.mi, gain, s.rank)?;
    }
    Ok(())
}

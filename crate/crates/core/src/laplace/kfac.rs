//! Layer-wise Kronecker-factored curvature.
//!
//! For a layer with input activations `a` (bias entry appended) and output
//! gradients `g`, the per-sample GGN block is `w · (a aᵀ) ⊗ (g gᵀ)`. The sum
//! over samples is approximated by `A ⊗ G` with
//! `A = Σ a aᵀ / √N` and `G = Σ w g gᵀ / √N`, which is exact for `N = 1`.
//! The posterior precision per layer is `(A + √λ I) ⊗ (s·G + √λ I)` where `s`
//! is the likelihood curvature scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_net::{gather, LayerTerm, Subnetwork};
use crate::numerics::{cholesky, CholeskyFactor, Matrix, SymMatrix};

/// Undamped Kronecker factors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KronFactors {
    pub a: SymMatrix,
    pub g: SymMatrix,
}

impl KronFactors {
    pub fn num_params(&self) -> usize {
        self.a.dim() * self.g.dim()
    }

    /// Dense `A ⊗ G` with index `(i_g · dim_a + i_a)`; for tests and small layers.
    pub fn kron_dense(&self) -> SymMatrix {
        let (na, ng) = (self.a.dim(), self.g.dim());
        SymMatrix::from_upper_fn(na * ng, |r, c| {
            let (gr, ar) = (r / na, r % na);
            let (gc, ac) = (c / na, c % na);
            self.g.get(gr, gc) * self.a.get(ar, ac)
        })
    }
}

/// Accumulates per-layer factors over the rows of `x`, sample weights `weights`.
pub fn kron_curvature(net: &dyn Subnetwork, x: &Matrix, weights: &[f64]) -> Result<Vec<KronFactors>> {
    let sizes =
        net.layer_sizes().ok_or_else(|| Error::ConfigInvalid("network has no layer structure for KFAC".into()))?;
    let mut factors: Vec<KronFactors> =
        sizes.iter().map(|&(na, ng)| KronFactors { a: SymMatrix::zeros(na), g: SymMatrix::zeros(ng) }).collect();
    let mut buf = Vec::new();
    for n in 0..x.rows() {
        gather(net.inputs(), x.row(n), &mut buf);
        let terms: Vec<LayerTerm> = net.layer_terms(&buf).expect("layer sizes imply layer terms");
        for (f, t) in factors.iter_mut().zip(&terms) {
            f.a.add_outer(1.0, &t.activation);
            f.g.add_outer(weights[n], &t.output_grad);
        }
    }
    let norm = if x.rows() > 0 { 1.0 / (x.rows() as f64).sqrt() } else { 0.0 };
    for f in &mut factors {
        f.a.symmetrize_from_upper();
        f.g.symmetrize_from_upper();
        f.a = f.a.scaled_plus_diagonal(norm, 0.0);
        f.g = f.g.scaled_plus_diagonal(norm, 0.0);
    }
    Ok(factors)
}

/// Damped and factored Kronecker pair of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KroneckerPair {
    /// Cholesky of `A + √λ I`.
    pub a_chol: CholeskyFactor,
    /// Cholesky of `s·G + √λ I`.
    pub g_chol: CholeskyFactor,
    pub damping: f64,
    #[serde(skip)]
    trace_a_inv: f64,
    #[serde(skip)]
    trace_g_inv: f64,
}

impl KroneckerPair {
    pub fn new(factors: &KronFactors, scale: f64, lambda: f64, jitter: &[f64]) -> Result<Self> {
        let damping = lambda.sqrt();
        let a_chol = cholesky(&factors.a.add_diagonal(damping), jitter)?;
        let g_chol = cholesky(&factors.g.scaled_plus_diagonal(scale, damping), jitter)?;
        let trace_a_inv = a_chol.inverse_trace();
        let trace_g_inv = g_chol.inverse_trace();
        Ok(Self { a_chol, g_chol, damping, trace_a_inv, trace_g_inv })
    }

    fn dims(&self) -> (f64, f64) {
        (self.a_chol.dim() as f64, self.g_chol.dim() as f64)
    }

    pub fn precision_logdet(&self) -> f64 {
        let (na, ng) = self.dims();
        ng * self.a_chol.logdet() + na * self.g_chol.logdet()
    }

    pub fn trace_cov(&self) -> f64 {
        self.trace_a_inv * self.trace_g_inv
    }

    /// `∂ log|precision| / ∂λ` with damping `√λ` on both factors.
    pub fn dlogdet_dlambda(&self) -> f64 {
        let (na, ng) = self.dims();
        (ng * self.trace_a_inv + na * self.trace_g_inv) / (2.0 * self.damping)
    }

    /// `∂ log|precision| / ∂ log s`.
    pub fn dlogdet_dlogscale(&self) -> f64 {
        let (na, ng) = self.dims();
        na * (ng - self.damping * self.trace_g_inv)
    }

    /// `(aᵀ Ā⁻¹ a)(gᵀ Ḡ⁻¹ g)`.
    pub fn variance(&self, term: &LayerTerm) -> f64 {
        self.a_chol.inv_quad_form(&term.activation) * self.g_chol.inv_quad_form(&term.output_grad)
    }
}

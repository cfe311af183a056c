//! Feature networks and joint pair networks with closed-form parameter Jacobians.
//!
//! A [`FeatureNetwork`] is a one-input MLP with a single GELU hidden layer and
//! a linear output. Its parameter vector is laid out as
//! `[input weights (H), hidden biases (H), output weights (H), output bias]`.
//!
//! A [`JointFeatureNetwork`] reads two features through two GELU hidden layers:
//! `[W1 (H×2, row-major), b1 (H), W2 (H×H, row-major), b2 (H), w3 (H), b3]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::numerics::{dot, gelu, gelu_deriv, Matrix};

pub const DEFAULT_HIDDEN: usize = 64;

/// `[J]_{n,i} = ∂f(x_n)/∂θ_i`, one row per sample.
pub type JacobianBlock = Matrix;

/// Per-layer Kronecker terms for one sample: the layer input with a trailing
/// 1 for the bias, and the gradient of the output w.r.t. the layer's
/// pre-activations.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTerm {
    pub activation: Vec<f64>,
    pub output_grad: Vec<f64>,
}

/// A parametric function of a fixed subset of input columns.
///
/// Everything the Laplace machinery needs: outputs, one Jacobian row per
/// sample, and optionally per-layer Kronecker terms.
pub trait Subnetwork: Sync {
    /// Design-matrix columns this network reads, in order.
    fn inputs(&self) -> &[usize];

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Output for one input tuple (`input.len() == self.inputs().len()`).
    fn eval(&self, input: &[f64]) -> f64;

    /// Output plus the Jacobian row written to `jac` (length `num_params`).
    fn eval_with_jacobian(&self, input: &[f64], jac: &mut [f64]) -> f64;

    /// Kronecker terms, one per layer, for layer-wise curvature factorisation.
    fn layer_terms(&self, _input: &[f64]) -> Option<Vec<LayerTerm>> {
        None
    }

    /// Parameter count of each layer, matching [`Self::layer_terms`].
    fn layer_sizes(&self) -> Option<Vec<(usize, usize)>> {
        None
    }
}

pub(crate) fn gather(inputs: &[usize], row: &[f64], buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(inputs.iter().map(|&c| row[c]));
}

/// Network outputs over every row of the design matrix.
pub fn outputs(net: &dyn Subnetwork, x: &Matrix, exec: Execution) -> Vec<f64> {
    let parts = exec::reduce_row_chunks(
        exec,
        x.rows(),
        |range| {
            let mut buf = Vec::new();
            range
                .map(|n| {
                    gather(net.inputs(), x.row(n), &mut buf);
                    net.eval(&buf)
                })
                .collect::<Vec<_>>()
        },
        |mut a, b| {
            a.extend(b);
            a
        },
    );
    parts.unwrap_or_default()
}

/// Jacobian block over every row of the design matrix.
pub fn jacobian(net: &dyn Subnetwork, x: &Matrix) -> JacobianBlock {
    let p = net.num_params();
    let mut jac = Matrix::zeros(x.rows(), p);
    let mut buf = Vec::new();
    for n in 0..x.rows() {
        gather(net.inputs(), x.row(n), &mut buf);
        net.eval_with_jacobian(&buf, jac.row_mut(n));
    }
    jac
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, out: &mut [f64]) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    for v in out {
        *v = normal.sample(rng);
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One-input, one-hidden-layer GELU network `f_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetwork {
    feature: [usize; 1],
    hidden: usize,
    params: Vec<f64>,
}

impl FeatureNetwork {
    pub fn param_count(hidden: usize) -> usize {
        3 * hidden + 1
    }

    /// He-normal weights, zero biases. Deterministic in `(d, seed)`.
    pub fn init(d: usize, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::ConfigInvalid("hidden width must be at least 1".into()));
        }
        let mut params = vec![0.0; Self::param_count(hidden)];
        let mut rng = seeded(seed, d as u64);
        he_normal(&mut rng, 1, &mut params[..hidden]);
        he_normal(&mut rng, hidden, &mut params[2 * hidden..3 * hidden]);
        Ok(Self { feature: [d], hidden, params })
    }

    pub fn from_params(d: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        if hidden == 0 || params.len() != Self::param_count(hidden) {
            return Err(Error::ShapeMismatch(format!("{} parameters for hidden width {hidden}", params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::ConfigInvalid(format!("non-finite parameter in network {d}")));
        }
        Ok(Self { feature: [d], hidden, params })
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self { feature: [d], hidden, params: vec![0.0; Self::param_count(hidden)] }
    }

    pub fn feature(&self) -> usize {
        self.feature[0]
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_weights(&self) -> &[f64] {
        &self.params[..self.hidden]
    }

    pub fn hidden_biases(&self) -> &[f64] {
        &self.params[self.hidden..2 * self.hidden]
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.params[2 * self.hidden..3 * self.hidden]
    }

    pub fn output_bias(&self) -> f64 {
        self.params[3 * self.hidden]
    }

    pub fn set_output_bias(&mut self, b: f64) {
        let h = self.hidden;
        self.params[3 * h] = b;
    }

    pub fn forward_one(&self, x: f64) -> f64 {
        let h = self.hidden;
        let (w, rest) = self.params.split_at(h);
        let (b, rest) = rest.split_at(h);
        let (v, c) = rest.split_at(h);
        let mut out = c[0];
        for j in 0..h {
            out += v[j] * gelu(w[j] * x + b[j]);
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&xi| self.forward_one(xi)).collect()
    }

    pub fn param_jacobian(&self, x: &[f64]) -> JacobianBlock {
        let mut jac = Matrix::zeros(x.len(), self.params.len());
        for (n, &xi) in x.iter().enumerate() {
            self.eval_with_jacobian(&[xi], jac.row_mut(n));
        }
        jac
    }
}

impl Subnetwork for FeatureNetwork {
    fn inputs(&self) -> &[usize] {
        &self.feature
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn eval(&self, input: &[f64]) -> f64 {
        self.forward_one(input[0])
    }

    fn eval_with_jacobian(&self, input: &[f64], jac: &mut [f64]) -> f64 {
        let x = input[0];
        let h = self.hidden;
        let (w, rest) = self.params.split_at(h);
        let (b, rest) = rest.split_at(h);
        let (v, c) = rest.split_at(h);
        let mut out = c[0];
        for j in 0..h {
            let z = w[j] * x + b[j];
            let act = gelu(z);
            let dz = v[j] * gelu_deriv(z);
            out += v[j] * act;
            jac[j] = dz * x;
            jac[h + j] = dz;
            jac[2 * h + j] = act;
        }
        jac[3 * h] = 1.0;
        out
    }

    fn layer_terms(&self, input: &[f64]) -> Option<Vec<LayerTerm>> {
        let x = input[0];
        let h = self.hidden;
        let (w, rest) = self.params.split_at(h);
        let (b, rest) = rest.split_at(h);
        let v = &rest[..h];
        let mut acts = Vec::with_capacity(h + 1);
        let mut grads = Vec::with_capacity(h);
        for j in 0..h {
            let z = w[j] * x + b[j];
            acts.push(gelu(z));
            grads.push(v[j] * gelu_deriv(z));
        }
        acts.push(1.0);
        Some(vec![
            LayerTerm { activation: vec![x, 1.0], output_grad: grads },
            LayerTerm { activation: acts, output_grad: vec![1.0] },
        ])
    }

    fn layer_sizes(&self) -> Option<Vec<(usize, usize)>> {
        Some(vec![(2, self.hidden), (self.hidden + 1, 1)])
    }
}

/// Two-input network `f_{d,d'}` with two GELU hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFeatureNetwork {
    pair: [usize; 2],
    hidden: usize,
    params: Vec<f64>,
}

struct JointLayout {
    h: usize,
}

impl JointLayout {
    fn w1(&self) -> std::ops::Range<usize> {
        0..2 * self.h
    }
    fn b1(&self) -> std::ops::Range<usize> {
        2 * self.h..3 * self.h
    }
    fn w2(&self) -> std::ops::Range<usize> {
        3 * self.h..3 * self.h + self.h * self.h
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = 3 * self.h + self.h * self.h;
        s..s + self.h
    }
    fn w3(&self) -> std::ops::Range<usize> {
        let s = 4 * self.h + self.h * self.h;
        s..s + self.h
    }
    fn b3(&self) -> usize {
        5 * self.h + self.h * self.h
    }
}

struct JointPass {
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    out: f64,
}

impl JointFeatureNetwork {
    pub fn param_count(hidden: usize) -> usize {
        hidden * hidden + 5 * hidden + 1
    }

    fn check_pair(d: usize, d2: usize) -> Result<()> {
        if d >= d2 {
            return Err(Error::ConfigInvalid(format!("joint network pair must satisfy d < d', got ({d}, {d2})")));
        }
        Ok(())
    }

    /// He-normal hidden layers; the output layer starts at zero so that
    /// appending the network does not change the model's predictions.
    pub fn init(d: usize, d2: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::check_pair(d, d2)?;
        if hidden == 0 {
            return Err(Error::ConfigInvalid("hidden width must be at least 1".into()));
        }
        let lay = JointLayout { h: hidden };
        let mut params = vec![0.0; Self::param_count(hidden)];
        // stream offset keeps joint draws disjoint from feature-net draws
        let mut rng = seeded(seed, (1u64 << 32) + ((d as u64) << 16) + d2 as u64);
        he_normal(&mut rng, 2, &mut params[lay.w1()]);
        he_normal(&mut rng, hidden, &mut params[lay.w2()]);
        Ok(Self { pair: [d, d2], hidden, params })
    }

    pub fn from_params(d: usize, d2: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        Self::check_pair(d, d2)?;
        if hidden == 0 || params.len() != Self::param_count(hidden) {
            return Err(Error::ShapeMismatch(format!("{} parameters for joint hidden width {hidden}", params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::ConfigInvalid(format!("non-finite parameter in joint network ({d}, {d2})")));
        }
        Ok(Self { pair: [d, d2], hidden, params })
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.pair[0], self.pair[1])
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn pass(&self, x: &[f64]) -> JointPass {
        let h = self.hidden;
        let lay = JointLayout { h };
        let p = &self.params;
        let w1 = &p[lay.w1()];
        let b1 = &p[lay.b1()];
        let z1: Vec<f64> = (0..h).map(|j| w1[2 * j] * x[0] + w1[2 * j + 1] * x[1] + b1[j]).collect();
        let h1: Vec<f64> = z1.iter().map(|&z| gelu(z)).collect();
        let w2 = &p[lay.w2()];
        let b2 = &p[lay.b2()];
        let z2: Vec<f64> = (0..h).map(|j| dot(&w2[j * h..(j + 1) * h], &h1) + b2[j]).collect();
        let h2: Vec<f64> = z2.iter().map(|&z| gelu(z)).collect();
        let out = dot(&p[lay.w3()], &h2) + p[lay.b3()];
        JointPass { z1, h1, z2, h2, out }
    }

    /// Backpropagated pre-activation gradients `(δ1, δ2)`.
    fn deltas(&self, pass: &JointPass) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let lay = JointLayout { h };
        let w3 = &self.params[lay.w3()];
        let w2 = &self.params[lay.w2()];
        let d2: Vec<f64> = (0..h).map(|j| w3[j] * gelu_deriv(pass.z2[j])).collect();
        let mut back = vec![0.0; h];
        for (j, &dj) in d2.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            for (b, w) in back.iter_mut().zip(&w2[j * h..(j + 1) * h]) {
                *b += dj * w;
            }
        }
        let d1: Vec<f64> = (0..h).map(|k| back[k] * gelu_deriv(pass.z1[k])).collect();
        (d1, d2)
    }

    /// Outputs for an N×2 input matrix.
    pub fn forward(&self, x_pair: &Matrix) -> Vec<f64> {
        (0..x_pair.rows()).map(|n| self.pass(x_pair.row(n)).out).collect()
    }

    pub fn param_jacobian(&self, x_pair: &Matrix) -> JacobianBlock {
        let mut jac = Matrix::zeros(x_pair.rows(), self.params.len());
        for n in 0..x_pair.rows() {
            self.eval_with_jacobian(x_pair.row(n), jac.row_mut(n));
        }
        jac
    }
}

impl Subnetwork for JointFeatureNetwork {
    fn inputs(&self) -> &[usize] {
        &self.pair
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn eval(&self, input: &[f64]) -> f64 {
        self.pass(input).out
    }

    fn eval_with_jacobian(&self, input: &[f64], jac: &mut [f64]) -> f64 {
        let h = self.hidden;
        let lay = JointLayout { h };
        let pass = self.pass(input);
        let (d1, d2) = self.deltas(&pass);
        let w1 = &mut jac[lay.w1()];
        for j in 0..h {
            w1[2 * j] = d1[j] * input[0];
            w1[2 * j + 1] = d1[j] * input[1];
        }
        jac[lay.b1()].copy_from_slice(&d1);
        let w2 = &mut jac[lay.w2()];
        for j in 0..h {
            for k in 0..h {
                w2[j * h + k] = d2[j] * pass.h1[k];
            }
        }
        jac[lay.b2()].copy_from_slice(&d2);
        jac[lay.w3()].copy_from_slice(&pass.h2);
        jac[lay.b3()] = 1.0;
        pass.out
    }

    fn layer_terms(&self, input: &[f64]) -> Option<Vec<LayerTerm>> {
        let pass = self.pass(input);
        let (d1, d2) = self.deltas(&pass);
        let mut a2 = pass.h1.clone();
        a2.push(1.0);
        let mut a3 = pass.h2.clone();
        a3.push(1.0);
        Some(vec![
            LayerTerm { activation: vec![input[0], input[1], 1.0], output_grad: d1 },
            LayerTerm { activation: a2, output_grad: d2 },
            LayerTerm { activation: a3, output_grad: vec![1.0] },
        ])
    }

    fn layer_sizes(&self) -> Option<Vec<(usize, usize)>> {
        let h = self.hidden;
        Some(vec![(3, h), (h + 1, h), (h + 1, 1)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn finite_difference_jacobian(net: &mut dyn Subnetwork, input: &[f64], h: f64) -> Vec<f64> {
        let p = net.num_params();
        let mut out = vec![0.0; p];
        for i in 0..p {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let up = net.eval(input);
            net.params_mut()[i] = orig - h;
            let down = net.eval(input);
            net.params_mut()[i] = orig;
            out[i] = (up - down) / (2.0 * h);
        }
        out
    }

    fn assert_close_jac(analytic: &[f64], numeric: &[f64]) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let tol = 1e-5 * a.abs().max(n.abs()) + 1e-7;
            assert!((a - n).abs() <= tol, "entry {i}: analytic {a} vs fd {n}");
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(FeatureNetwork::init(0, 1, 7).unwrap().num_params(), 4);
        assert_eq!(FeatureNetwork::init(2, 64, 0).unwrap().num_params(), 193);
        assert_eq!(JointFeatureNetwork::init(0, 1, 64, 0).unwrap().num_params(), 4417);
        assert!(FeatureNetwork::init(0, 0, 1).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = FeatureNetwork::init(3, 16, 42).unwrap();
        let b = FeatureNetwork::init(3, 16, 42).unwrap();
        assert_eq!(a, b);
        let c = FeatureNetwork::init(4, 16, 42).unwrap();
        assert_ne!(a.params(), c.params());
        assert!(a.hidden_biases().iter().all(|&b| b == 0.0));
        assert_eq!(a.output_bias(), 0.0);
    }

    #[test]
    fn forward_special_cases() {
        let zero = FeatureNetwork::zeros(0, 8);
        assert!(zero.forward(&[-1.0, 0.0, 3.0]).iter().all(|&v| v == 0.0));

        let unit = FeatureNetwork::from_params(0, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        for x in [-2.0, -0.3, 0.0, 0.7, 2.5] {
            assert_eq!(unit.forward_one(x), gelu(x));
        }

        let mut bias = FeatureNetwork::zeros(0, 4);
        bias.set_output_bias(1.25);
        assert!(bias.forward(&[-5.0, 0.0, 9.0]).iter().all(|&v| v == 1.25));
    }

    #[test]
    fn jacobian_special_columns() {
        let net = FeatureNetwork::init(0, 5, 3).unwrap();
        let jac = net.param_jacobian(&[-1.0, 0.2, 4.0]);
        for n in 0..3 {
            assert_eq!(jac.get(n, 15), 1.0);
        }
        let unit = FeatureNetwork::from_params(0, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let j0 = unit.param_jacobian(&[0.0]);
        assert_eq!(j0.get(0, 2), 0.0);
    }

    #[test]
    fn feature_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let mut net = FeatureNetwork::init(0, 6, seed).unwrap();
            for p in net.params_mut() {
                *p += rng.random_range(-0.5..0.5);
            }
            let x = rng.random_range(-3.0..3.0);
            let mut jac = vec![0.0; net.num_params()];
            net.eval_with_jacobian(&[x], &mut jac);
            let fd = finite_difference_jacobian(&mut net, &[x], 1e-6);
            assert_close_jac(&jac, &fd);
        }
    }

    #[test]
    fn joint_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let mut net = JointFeatureNetwork::init(1, 3, 4, seed).unwrap();
            for p in net.params_mut() {
                *p += rng.random_range(-0.5..0.5);
            }
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let mut jac = vec![0.0; net.num_params()];
            let out = net.eval_with_jacobian(&x, &mut jac);
            assert_eq!(out, net.eval(&x));
            assert_eq!(jac[net.num_params() - 1], 1.0);
            let fd = finite_difference_jacobian(&mut net, &x, 1e-6);
            assert_close_jac(&jac, &fd);
        }
    }

    #[test]
    fn joint_zero_output_layer() {
        let net = JointFeatureNetwork::init(0, 2, 8, 9).unwrap();
        let x = Matrix::from_row_major(3, 2, vec![0.1, 0.2, -1.0, 3.0, 2.0, -2.0]).unwrap();
        assert!(net.forward(&x).iter().all(|&v| v == 0.0));
        let zero = JointFeatureNetwork::from_params(0, 2, 3, vec![0.0; 25]).unwrap();
        assert!(zero.forward(&x).iter().all(|&v| v == 0.0));
        assert!(JointFeatureNetwork::init(2, 2, 4, 0).is_err());
    }

    #[test]
    fn output_layer_is_exactly_linear() {
        // f(θ + δ) − f(θ) = J δ when δ only touches output weights and bias
        let net = FeatureNetwork::init(0, 7, 21).unwrap();
        let xs = [-1.5, 0.0, 0.4, 2.2];
        let jac = net.param_jacobian(&xs);
        let mut moved = net.clone();
        let delta: Vec<f64> = (0..8).map(|i| 0.3 - 0.1 * i as f64).collect();
        for (k, dv) in delta.iter().enumerate() {
            moved.params_mut()[14 + k] += dv;
        }
        let before = net.forward(&xs);
        let after = moved.forward(&xs);
        for n in 0..xs.len() {
            let predicted: f64 = (0..8).map(|k| jac.get(n, 14 + k) * delta[k]).sum();
            assert!((after[n] - before[n] - predicted).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_terms_reproduce_jacobian() {
        // vec(g aᵀ) over layers must be a permutation of the Jacobian row
        let net = JointFeatureNetwork::init(0, 1, 3, 4).unwrap();
        let mut net = net;
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            *p += 0.05 * (i as f64).cos();
        }
        let x = [0.7, -0.4];
        let mut jac = vec![0.0; net.num_params()];
        net.eval_with_jacobian(&x, &mut jac);
        let mut from_terms: Vec<f64> = net
            .layer_terms(&x)
            .unwrap()
            .iter()
            .flat_map(|t| t.output_grad.iter().flat_map(move |g| t.activation.iter().map(move |a| g * a)))
            .collect();
        let mut sorted = jac.clone();
        sorted.sort_by(f64::total_cmp);
        from_terms.sort_by(f64::total_cmp);
        assert_eq!(sorted.len(), from_terms.len());
        for (a, b) in sorted.iter().zip(&from_terms) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

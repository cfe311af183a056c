//! Dense linear algebra and scalar primitives.
//!
//! Everything here is 64-bit. Matrices are row-major. The symmetric type only
//! guarantees symmetry, positive definiteness is established by [`cholesky`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default escalating diagonal jitter for near-singular curvature matrices.
pub const DEFAULT_JITTER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

const SYMMETRY_RTOL: f64 = 1e-12;

/// General dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column_values(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Select rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }
}

/// Symmetric dense matrix stored in full row-major form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.entries[i * diag.len() + i] = d;
        }
        m
    }

    /// Checks shape, finiteness and symmetry (relative 1e-12).
    pub fn from_row_major(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!("{} entries for a {dim}x{dim} symmetric matrix", entries.len())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite entry in symmetric matrix".into()));
        }
        let scale = entries.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (entries[i * dim + j], entries[j * dim + i]);
                if (a - b).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::ShapeMismatch(format!("matrix not symmetric at ({i}, {j}): {a} vs {b}")));
                }
            }
        }
        Ok(Self { dim, entries })
    }

    /// Builds from the upper triangle of `f(i, j)` with `i <= j`, mirrored.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.entries[i * dim + j] = v;
                m.entries[j * dim + i] = v;
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    /// `self + shift * I`.
    pub fn add_diagonal(&self, shift: f64) -> SymMatrix {
        let mut out = self.clone();
        for i in 0..self.dim {
            out.entries[i * self.dim + i] += shift;
        }
        out
    }

    /// `scale * self + shift * I`.
    pub fn scaled_plus_diagonal(&self, scale: f64, shift: f64) -> SymMatrix {
        let mut out = SymMatrix { dim: self.dim, entries: self.entries.iter().map(|v| v * scale).collect() };
        for i in 0..self.dim {
            out.entries[i * self.dim + i] += shift;
        }
        out
    }

    /// Adds `w * v vᵀ`, keeping exact symmetry.
    pub fn add_outer(&mut self, w: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.dim);
        let n = self.dim;
        for i in 0..n {
            let wi = w * v[i];
            if wi == 0.0 {
                continue;
            }
            for j in i..n {
                self.entries[i * n + j] += wi * v[j];
            }
        }
    }

    /// Copies the upper triangle into the lower one (pairs with [`Self::add_outer`]).
    pub fn symmetrize_from_upper(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                self.entries[j * n + i] = self.entries[i * n + j];
            }
        }
    }

    pub fn add_assign(&mut self, other: &SymMatrix) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += b;
        }
    }

    /// `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| dot(self.row(i), v)).collect()
    }

    /// `vᵀ · self · v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.mul_vec(v))
    }

    /// Principal submatrix on the listed indices.
    pub fn submatrix(&self, idx: &[usize]) -> SymMatrix {
        SymMatrix::from_upper_fn(idx.len(), |i, j| self.get(idx[i], idx[j]))
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix { rows: self.dim, cols: self.dim, data: self.entries.clone() }
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A + jitter_applied · I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
    jitter_applied: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// `log |A|` of the (jittered) factored matrix.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.get(i, i).ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place.
    pub fn forward_substitute(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s = dot(row, &b[..i]);
            b[i] = (b[i] - s) / self.lower[i * n + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_substitute(&self, y: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
    }

    /// Solves `A x = b`.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_substitute(&mut x);
        self.backward_substitute(&mut x);
        x
    }

    /// `bᵀ A⁻¹ b` as `‖L⁻¹ b‖²`.
    pub fn inv_quad_form(&self, b: &[f64]) -> f64 {
        let mut y = b.to_vec();
        self.forward_substitute(&mut y);
        dot(&y, &y)
    }

    /// `L⁻¹` as a dense row-major lower-triangular array.
    fn lower_inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        for j in 0..n {
            inv[j * n + j] = 1.0 / self.get(j, j);
            for i in (j + 1)..n {
                let mut s = 0.0;
                for k in j..i {
                    s += self.lower[i * n + k] * inv[k * n + j];
                }
                inv[i * n + j] = -s / self.get(i, i);
            }
        }
        inv
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.dim;
        let li = self.lower_inverse();
        SymMatrix::from_upper_fn(n, |i, j| {
            // rows i..n of column i and column j of L⁻¹
            (j..n).map(|k| li[k * n + i] * li[k * n + j]).sum()
        })
    }

    /// `tr(A⁻¹) = ‖L⁻¹‖²_F`.
    pub fn inverse_trace(&self) -> f64 {
        self.lower_inverse().iter().map(|v| v * v).sum()
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.dim;
        SymMatrix::from_upper_fn(n, |i, j| (0..=i.min(j)).map(|k| self.get(i, k) * self.get(j, k)).sum())
    }
}

/// Factors `A + jitter · I` with the first jitter in `schedule` that succeeds.
pub fn cholesky(a: &SymMatrix, schedule: &[f64]) -> Result<CholeskyFactor> {
    let mut last = 0.0;
    for &jitter in schedule {
        last = jitter;
        if let Some(lower) = try_cholesky(a, jitter) {
            return Ok(CholeskyFactor { dim: a.dim, lower, jitter_applied: jitter });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

/// Factors with [`DEFAULT_JITTER`].
pub fn cholesky_default(a: &SymMatrix) -> Result<CholeskyFactor> {
    cholesky(a, &DEFAULT_JITTER)
}

fn try_cholesky(a: &SymMatrix, jitter: f64) -> Option<Vec<f64>> {
    let n = a.dim;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                let d = a.get(i, i) + jitter - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a.get(i, j) - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// `log |A|` for positive definite `A`.
pub fn logdet_pd(a: &SymMatrix) -> Result<f64> {
    Ok(cholesky_default(a)?.logdet())
}

/// Solves `A X = B` for positive definite `A`, column by column.
pub fn solve_pd(a: &SymMatrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != a.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} system with right-hand side of {} rows",
            a.dim(),
            a.dim(),
            b.rows()
        )));
    }
    let chol = cholesky_default(a)?;
    let mut x = Matrix::zeros(b.rows(), b.cols());
    for j in 0..b.cols() {
        let col = chol.solve_vec(&b.column_values(j));
        for (i, v) in col.into_iter().enumerate() {
            x.set(i, j, v);
        }
    }
    Ok(x)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `Φ(x) + x φ(x)`.
pub fn gelu_deriv(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factor_has_no_jitter() {
        let l = cholesky(&SymMatrix::identity(3), &DEFAULT_JITTER).unwrap();
        assert_eq!(l.jitter_applied(), 0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(l.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn two_by_two_factor() {
        let a = SymMatrix::from_row_major(2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        let l = cholesky(&a, &[0.0]).unwrap();
        assert!((l.get(0, 0) - 2.0).abs() < 1e-15);
        assert_eq!(l.get(0, 1), 0.0);
        assert!((l.get(1, 0) - 1.0).abs() < 1e-15);
        assert!((l.get(1, 1) - 2f64.sqrt()).abs() < 1e-15);
        let r = l.reconstruct();
        for (x, y) in r.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn indefinite_rejected() {
        let a = SymMatrix::from_row_major(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(cholesky(&a, &[0.0]), Err(Error::NotPositiveDefinite { .. })));
        // still fails across the whole default schedule: min eigenvalue is -1
        assert!(cholesky_default(&a).is_err());
    }

    #[test]
    fn jitter_escalates_on_singular() {
        let a = SymMatrix::from_row_major(2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let l = cholesky_default(&a).unwrap();
        assert!(l.jitter_applied() > 0.0);
    }

    #[test]
    fn asymmetric_rejected() {
        assert!(SymMatrix::from_row_major(2, vec![1.0, 0.5, 0.4, 1.0]).is_err());
    }

    #[test]
    fn logdet_examples() {
        assert_eq!(logdet_pd(&SymMatrix::identity(5)).unwrap(), 0.0);
        let d = logdet_pd(&SymMatrix::diagonal(&[2.0, 3.0])).unwrap();
        assert!((d - 6f64.ln()).abs() < 1e-12);
        let a = SymMatrix::from_row_major(2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((logdet_pd(&a).unwrap() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn solve_examples() {
        let b = Matrix::from_row_major(3, 2, vec![1.0, -2.0, 3.5, 0.0, 7.0, 1e-3]).unwrap();
        assert_eq!(solve_pd(&SymMatrix::identity(3), &b).unwrap(), b);
        let x = solve_pd(&SymMatrix::diagonal(&[2.0, 4.0]), &Matrix::column(&[2.0, 4.0])).unwrap();
        assert!(x.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(matches!(solve_pd(&SymMatrix::identity(2), &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn inverse_and_trace_agree() {
        let a = SymMatrix::from_row_major(3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]).unwrap();
        let l = cholesky_default(&a).unwrap();
        let inv = l.inverse();
        assert!((inv.trace() - l.inverse_trace()).abs() < 1e-14);
        let prod = a.to_matrix().matmul(&inv.to_matrix()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - want).abs() < 1e-14);
            }
        }
        let v = [0.3, -1.0, 2.0];
        assert!((l.inv_quad_form(&v) - inv.quad_form(&v)).abs() < 1e-13);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert_eq!(gelu_deriv(0.0), 0.5);
    }

    #[test]
    fn log_sigmoid_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(800.0) == 0.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
    }
}

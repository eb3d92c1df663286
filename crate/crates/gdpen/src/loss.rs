//! Loss models: squared loss, exponential-family negative log-likelihood,
//! and the grouped log-determinant loss over upper-triangle coordinates.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GdError, Result};

/// Log-partition function of a regular exponential family in canonical form,
/// with enough structure to evaluate, differentiate, and sample.
pub trait LogPartition: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, theta: &DVector<f64>) -> f64;
    /// `grad A(theta) = E_theta[phi(X)]`.
    fn grad(&self, theta: &DVector<f64>) -> DVector<f64>;
    /// `hess A(theta) = cov_theta[phi(X)]`; symmetric PSD.
    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64>;
    /// Draw the sufficient statistic of one observation.
    fn sample_suff(&self, theta: &DVector<f64>, rng: &mut dyn rand::RngCore) -> DVector<f64>;
}

/// Gaussian mean model with identity covariance: `A(theta) = |theta|^2 / 2`.
#[derive(Debug, Clone)]
pub struct GaussianMeanFamily {
    pub p: usize,
}

impl LogPartition for GaussianMeanFamily {
    fn dim(&self) -> usize {
        self.p
    }
    fn value(&self, theta: &DVector<f64>) -> f64 {
        0.5 * theta.norm_squared()
    }
    fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        theta.clone()
    }
    fn hessian(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.p, self.p)
    }
    fn sample_suff(&self, theta: &DVector<f64>, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        DVector::from_fn(self.p, |i, _| theta[i] + rng.sample::<f64, _>(StandardNormal))
    }
}

/// Independent Bernoulli coordinates: `A(theta) = sum_i log(1 + e^{theta_i})`.
#[derive(Debug, Clone)]
pub struct BernoulliFamily {
    pub p: usize,
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        0.0
    } else {
        (1.0 + v.exp()).ln()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl LogPartition for BernoulliFamily {
    fn dim(&self) -> usize {
        self.p
    }
    fn value(&self, theta: &DVector<f64>) -> f64 {
        theta.iter().map(|&v| softplus(v)).sum()
    }
    fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        theta.map(sigmoid)
    }
    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&theta.map(|v| {
            let s = sigmoid(v);
            s * (1.0 - s)
        }))
    }
    fn sample_suff(&self, theta: &DVector<f64>, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        DVector::from_fn(self.p, |i, _| {
            if rng.random::<f64>() < sigmoid(theta[i]) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Product of categorical variables in the redundant one-hot representation:
/// per block `b` of size `k_b`, `A_b(theta) = log sum_j e^{theta_j}`. Adding a
/// constant to a block does not change the distribution, so a sum-to-zero
/// subspace constraint per block makes the family minimal.
#[derive(Debug, Clone)]
pub struct CategoricalBlocksFamily {
    pub block_sizes: Vec<usize>,
}

impl CategoricalBlocksFamily {
    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.block_sizes.len());
        let mut at = 0;
        for &k in &self.block_sizes {
            off.push(at);
            at += k;
        }
        off
    }

    fn block_softmax(theta: &DVector<f64>, off: usize, k: usize) -> Vec<f64> {
        let mx = (0..k).map(|j| theta[off + j]).fold(f64::NEG_INFINITY, f64::max);
        let mut e: Vec<f64> = (0..k).map(|j| (theta[off + j] - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for v in &mut e {
            *v /= z;
        }
        e
    }

    /// Orthonormal basis of the product of per-block sum-to-zero subspaces.
    pub fn sum_zero_subspace(&self) -> crate::geometry::Subspace {
        let p: usize = self.block_sizes.iter().sum();
        let mut cols: Vec<DVector<f64>> = Vec::new();
        let mut off = 0;
        for &k in &self.block_sizes {
            // Gram-Schmidt over {e_j - e_{j+1}} within the block.
            let mut local: Vec<DVector<f64>> = Vec::new();
            for j in 0..k.saturating_sub(1) {
                let mut v = DVector::zeros(p);
                v[off + j] = 1.0;
                v[off + j + 1] = -1.0;
                for b in &local {
                    let c = v.dot(b);
                    v -= b * c;
                }
                let n = v.norm();
                if n > 1e-12 {
                    local.push(v / n);
                }
            }
            cols.extend(local);
            off += k;
        }
        let mut basis = DMatrix::zeros(p, cols.len());
        for (j, c) in cols.iter().enumerate() {
            basis.set_column(j, c);
        }
        crate::geometry::Subspace::from_orthonormal_basis(basis).expect("orthonormal by construction")
    }
}

impl LogPartition for CategoricalBlocksFamily {
    fn dim(&self) -> usize {
        self.block_sizes.iter().sum()
    }
    fn value(&self, theta: &DVector<f64>) -> f64 {
        let mut total = 0.0;
        for (&k, off) in self.block_sizes.iter().zip(self.offsets()) {
            let mx = (0..k).map(|j| theta[off + j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|j| (theta[off + j] - mx).exp()).sum();
            total += mx + z.ln();
        }
        total
    }
    fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for (&k, off) in self.block_sizes.iter().zip(self.offsets()) {
            let pi = Self::block_softmax(theta, off, k);
            for j in 0..k {
                g[off + j] = pi[j];
            }
        }
        g
    }
    fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let p = self.dim();
        let mut h = DMatrix::zeros(p, p);
        for (&k, off) in self.block_sizes.iter().zip(self.offsets()) {
            let pi = Self::block_softmax(theta, off, k);
            for a in 0..k {
                for b in 0..k {
                    let v = if a == b {
                        pi[a] * (1.0 - pi[a])
                    } else {
                        -pi[a] * pi[b]
                    };
                    h[(off + a, off + b)] = v;
                }
            }
        }
        h
    }
    fn sample_suff(&self, theta: &DVector<f64>, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        for (&k, off) in self.block_sizes.iter().zip(self.offsets()) {
            let pi = Self::block_softmax(theta, off, k);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = k - 1;
            for (j, &pj) in pi.iter().enumerate() {
                acc += pj;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            x[off + pick] = 1.0;
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Block layout for log-det losses
// ---------------------------------------------------------------------------

/// Upper-triangle coordinate layout of a symmetric `d x d` matrix whose rows
/// and columns are grouped into nodes of fixed sizes.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub node_sizes: Vec<usize>,
    pub node_offsets: Vec<usize>,
    pub d: usize,
    pub tri_dim: usize,
}

impl BlockLayout {
    pub fn new(node_sizes: Vec<usize>) -> Self {
        let mut node_offsets = Vec::with_capacity(node_sizes.len());
        let mut at = 0;
        for &b in &node_sizes {
            node_offsets.push(at);
            at += b;
        }
        let d = at;
        BlockLayout {
            node_sizes,
            node_offsets,
            d,
            tri_dim: d * (d + 1) / 2,
        }
    }

    pub fn nodes(&self) -> usize {
        self.node_sizes.len()
    }

    /// Index of entry `(i, j)` with `i <= j` in the packed upper triangle.
    pub fn tri_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= j && j < self.d);
        j * (j + 1) / 2 + i
    }

    pub fn to_matrix(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d, self.d);
        for j in 0..self.d {
            for i in 0..=j {
                let v = theta[self.tri_index(i, j)];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn from_matrix(&self, m: &DMatrix<f64>) -> DVector<f64> {
        let mut theta = DVector::zeros(self.tri_dim);
        for j in 0..self.d {
            for i in 0..=j {
                theta[self.tri_index(i, j)] = m[(i, j)];
            }
        }
        theta
    }

    /// Groups over the triangle coordinates, one per unordered node pair
    /// `(s, t)` with `s <= t`, ordered lexicographically. Returns the groups,
    /// the pair labels, and the set of diagonal (s == t) group indices, which
    /// stay unpenalized.
    pub fn pair_groups(&self) -> (Vec<Vec<usize>>, Vec<(usize, usize)>, BTreeSet<usize>) {
        let n = self.nodes();
        let mut groups = Vec::new();
        let mut labels = Vec::new();
        let mut diag = BTreeSet::new();
        for s in 0..n {
            for t in s..n {
                let mut idx = Vec::new();
                for i in self.node_offsets[s]..self.node_offsets[s] + self.node_sizes[s] {
                    for j in self.node_offsets[t]..self.node_offsets[t] + self.node_sizes[t] {
                        if i <= j {
                            idx.push(self.tri_index(i, j));
                        }
                    }
                }
                if s == t {
                    diag.insert(groups.len());
                }
                labels.push((s, t));
                groups.push(idx);
            }
        }
        (groups, labels, diag)
    }
}

// ---------------------------------------------------------------------------
// Loss models
// ---------------------------------------------------------------------------

/// Value/gradient/Hessian interface for the supported losses.
#[derive(Debug, Clone)]
pub enum LossModel {
    /// `l(theta) = |y - X theta|^2 / (2n)`, with `X^T X / n` and `X^T y / n`
    /// cached at construction.
    Squared {
        x: DMatrix<f64>,
        y: DVector<f64>,
        n: usize,
        q: DMatrix<f64>,
        xty: DVector<f64>,
        yty_over_n: f64,
    },
    /// `l(theta) = A(theta) - theta^T phi_bar`.
    ExpFam {
        family: Arc<dyn LogPartition>,
        suff_mean: DVector<f64>,
        n: usize,
    },
    /// `l(Theta) = trace(SigmaHat Theta) - log det Theta` over the packed
    /// upper triangle of `Theta`.
    LogDet {
        sigma_hat: DMatrix<f64>,
        layout: BlockLayout,
        n: usize,
    },
}

impl LossModel {
    /// Validates the column-normalization convention `|x_col|_2 <= sqrt(n)`.
    pub fn squared(x: DMatrix<f64>, y: DVector<f64>) -> Result<LossModel> {
        let n = x.nrows();
        if y.len() != n {
            return Err(GdError::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        let bound = (n as f64).sqrt() * (1.0 + 1e-9);
        for j in 0..x.ncols() {
            let cn = x.column(j).norm();
            if cn > bound {
                return Err(GdError::Precondition(format!(
                    "column {j} has norm {cn:.6}, above sqrt(n) = {:.6}; rescale the design",
                    (n as f64).sqrt()
                )));
            }
        }
        Ok(Self::squared_unchecked(x, y))
    }

    /// Rescales every column to `|x_col|_2 = sqrt(n)` exactly and returns the
    /// per-column scale factors applied.
    pub fn squared_normalized(mut x: DMatrix<f64>, y: DVector<f64>) -> Result<(LossModel, Vec<f64>)> {
        let n = x.nrows();
        let target = (n as f64).sqrt();
        let mut scales = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let cn = x.column(j).norm();
            if cn <= 1e-14 {
                return Err(GdError::Precondition(format!(
                    "column {j} is zero; cannot normalize"
                )));
            }
            let s = target / cn;
            let mut col = x.column_mut(j);
            col *= s;
            scales.push(s);
        }
        let loss = Self::squared(x, y)?;
        Ok((loss, scales))
    }

    pub(crate) fn squared_unchecked(x: DMatrix<f64>, y: DVector<f64>) -> LossModel {
        let n = x.nrows();
        let nf = n as f64;
        let q = x.transpose() * &x / nf;
        let xty = x.transpose() * &y / nf;
        let yty_over_n = y.norm_squared() / nf;
        LossModel::Squared {
            x,
            y,
            n,
            q,
            xty,
            yty_over_n,
        }
    }

    pub fn expfam(family: Arc<dyn LogPartition>, suff_mean: DVector<f64>, n: usize) -> Result<LossModel> {
        if suff_mean.len() != family.dim() {
            return Err(GdError::DimensionMismatch {
                expected: family.dim(),
                got: suff_mean.len(),
            });
        }
        Ok(LossModel::ExpFam {
            family,
            suff_mean,
            n,
        })
    }

    pub fn logdet(sigma_hat: DMatrix<f64>, layout: BlockLayout, n: usize) -> Result<LossModel> {
        crate::geometry::check_symmetric(&sigma_hat)?;
        if sigma_hat.nrows() != layout.d {
            return Err(GdError::DimensionMismatch {
                expected: layout.d,
                got: sigma_hat.nrows(),
            });
        }
        Ok(LossModel::LogDet {
            sigma_hat,
            layout,
            n,
        })
    }

    /// Parameter dimension (triangle dimension for log-det).
    pub fn dim(&self) -> usize {
        match self {
            LossModel::Squared { q, .. } => q.nrows(),
            LossModel::ExpFam { family, .. } => family.dim(),
            LossModel::LogDet { layout, .. } => layout.tri_dim,
        }
    }

    pub fn sample_count(&self) -> usize {
        match self {
            LossModel::Squared { n, .. } => *n,
            LossModel::ExpFam { n, .. } => *n,
            LossModel::LogDet { n, .. } => *n,
        }
    }

    pub fn domain_ok(&self, theta: &DVector<f64>) -> bool {
        match self {
            LossModel::LogDet { layout, .. } => {
                let m = layout.to_matrix(theta);
                let shifted = m - DMatrix::identity(layout.d, layout.d) * 1e-10;
                Cholesky::new(shifted).is_some()
            }
            _ => true,
        }
    }

    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.check_dim(theta)?;
        match self {
            LossModel::Squared {
                q, xty, yty_over_n, ..
            } => Ok(0.5 * (theta.dot(&(q * theta)) + yty_over_n) - theta.dot(xty)),
            LossModel::ExpFam {
                family, suff_mean, ..
            } => Ok(family.value(theta) - theta.dot(suff_mean)),
            LossModel::LogDet {
                sigma_hat, layout, ..
            } => {
                let m = layout.to_matrix(theta);
                let chol = Cholesky::new(m.clone())
                    .ok_or_else(|| GdError::Domain("Theta is not positive definite".into()))?;
                let logdet: f64 = (0..layout.d)
                    .map(|i| chol.l_dirty()[(i, i)].ln())
                    .sum::<f64>()
                    * 2.0;
                let trace = sigma_hat.zip_fold(&m, 0.0, |acc, a, b| acc + a * b);
                Ok(trace - logdet)
            }
        }
    }

    pub fn grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(theta)?;
        match self {
            LossModel::Squared { q, xty, .. } => Ok(q * theta - xty),
            LossModel::ExpFam {
                family, suff_mean, ..
            } => Ok(family.grad(theta) - suff_mean),
            LossModel::LogDet {
                sigma_hat, layout, ..
            } => {
                let m = layout.to_matrix(theta);
                let chol = Cholesky::new(m)
                    .ok_or_else(|| GdError::Domain("Theta is not positive definite".into()))?;
                let inv = chol.inverse();
                let g_full = sigma_hat - inv;
                // Off-diagonal triangle coordinates appear twice in Theta.
                let mut g = DVector::zeros(layout.tri_dim);
                for j in 0..layout.d {
                    for i in 0..=j {
                        let v = g_full[(i, j)];
                        g[layout.tri_index(i, j)] = if i == j { v } else { 2.0 * v };
                    }
                }
                Ok(g)
            }
        }
    }

    pub fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(theta)?;
        match self {
            LossModel::Squared { q, .. } => Ok(q.clone()),
            LossModel::ExpFam { family, .. } => Ok(family.hessian(theta)),
            LossModel::LogDet { layout, .. } => {
                let m = layout.to_matrix(theta);
                let chol = Cholesky::new(m)
                    .ok_or_else(|| GdError::Domain("Theta is not positive definite".into()))?;
                let w = chol.inverse();
                let dim = layout.tri_dim;
                let mut h = DMatrix::zeros(dim, dim);
                for cj in 0..layout.d {
                    for ci in 0..=cj {
                        let col = layout.tri_index(ci, cj);
                        for rj in 0..layout.d {
                            for ri in 0..=rj {
                                let row = layout.tri_index(ri, rj);
                                if row > col {
                                    continue;
                                }
                                // trace(W E_{ri,rj} W E_{ci,cj}) with symmetric
                                // basis matrices E.
                                let v = if ri == rj && ci == cj {
                                    w[(ri, ci)] * w[(ci, ri)]
                                } else if ri == rj {
                                    2.0 * w[(ri, ci)] * w[(cj, ri)]
                                } else if ci == cj {
                                    2.0 * w[(ri, ci)] * w[(ci, rj)]
                                } else {
                                    2.0 * (w[(rj, ci)] * w[(cj, ri)] + w[(rj, cj)] * w[(ci, ri)])
                                };
                                h[(row, col)] = v;
                                h[(col, row)] = v;
                            }
                        }
                    }
                }
                Ok(h)
            }
        }
    }

    /// Fisher information `Q = hess l(theta_star)`.
    pub fn fisher(&self, theta_star: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.hessian(theta_star)
    }

    fn check_dim(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(GdError::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(loss: &LossModel, theta: &DVector<f64>) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(theta.len(), |i, _| {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            (loss.value(&tp).unwrap() - loss.value(&tm).unwrap()) / (2.0 * h)
        })
    }

    fn assert_grad_close(loss: &LossModel, theta: &DVector<f64>) {
        let g = loss.grad(theta).unwrap();
        let fd = fd_grad(loss, theta);
        let rel = (&g - &fd).norm() / (1.0 + g.norm());
        assert!(rel < 1e-5, "gradient mismatch: rel err {rel:.3e}");
    }

    #[test]
    fn squared_loss_hand_example() {
        let x = DMatrix::identity(2, 2);
        let y = DVector::from_row_slice(&[1.0, 2.0]);
        let loss = LossModel::squared(x, y).unwrap();
        let theta = DVector::zeros(2);
        assert!((loss.value(&theta).unwrap() - 1.25).abs() < 1e-12);
        let g = loss.grad(&theta).unwrap();
        assert!((g - DVector::from_row_slice(&[-0.5, -1.0])).amax() < 1e-12);
    }

    #[test]
    fn squared_loss_rejects_oversized_columns() {
        let x = DMatrix::from_row_slice(2, 1, &[3.0, 3.0]);
        let y = DVector::zeros(2);
        assert!(LossModel::squared(x.clone(), y.clone()).is_err());
        let (loss, scales) = LossModel::squared_normalized(x, y).unwrap();
        match &loss {
            LossModel::Squared { x, .. } => {
                assert!((x.column(0).norm() - 2.0_f64.sqrt()).abs() < 1e-12)
            }
            _ => unreachable!(),
        }
        assert!((scales[0] - 2.0_f64.sqrt() / 18.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn expfam_gaussian_mean_gradient_is_theta_minus_mean() {
        let fam = Arc::new(GaussianMeanFamily { p: 3 });
        let phi_bar = DVector::from_row_slice(&[0.2, -0.4, 1.0]);
        let loss = LossModel::expfam(fam, phi_bar.clone(), 50).unwrap();
        let theta = DVector::from_row_slice(&[1.0, 0.0, -2.0]);
        let g = loss.grad(&theta).unwrap();
        assert!((g - (&theta - &phi_bar)).amax() < 1e-12);
    }

    #[test]
    fn logdet_gradient_vanishes_at_inverse_sample_covariance() {
        let layout = BlockLayout::new(vec![1, 1, 1]);
        let sigma = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0],
        );
        let theta_at_inverse = layout.from_matrix(
            &Cholesky::new(sigma.clone()).unwrap().inverse(),
        );
        let loss = LossModel::logdet(sigma, layout, 100).unwrap();
        let g = loss.grad(&theta_at_inverse).unwrap();
        assert!(g.amax() < 1e-9, "gradient at MLE should vanish: {g}");
    }

    #[test]
    fn logdet_errors_outside_positive_definite_domain() {
        let layout = BlockLayout::new(vec![1, 1]);
        let loss = LossModel::logdet(DMatrix::identity(2, 2), layout.clone(), 10).unwrap();
        let theta = layout.from_matrix(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(!loss.domain_ok(&theta));
        assert!(loss.value(&theta).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // Squared.
        let x = DMatrix::from_fn(12, 4, |_, _| rng.random_range(-0.5..0.5));
        let y = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let sq = LossModel::squared(x, y).unwrap();
        // ExpFam variants.
        let bern = LossModel::expfam(
            Arc::new(BernoulliFamily { p: 4 }),
            DVector::from_row_slice(&[0.2, 0.7, 0.5, 0.1]),
            30,
        )
        .unwrap();
        let cat = LossModel::expfam(
            Arc::new(CategoricalBlocksFamily {
                block_sizes: vec![2, 2],
            }),
            DVector::from_row_slice(&[0.3, 0.7, 0.6, 0.4]),
            30,
        )
        .unwrap();
        for loss in [&sq, &bern, &cat] {
            for _ in 0..15 {
                let theta = DVector::from_fn(loss.dim(), |_, _| rng.random_range(-1.0..1.0));
                assert_grad_close(loss, &theta);
            }
        }
        // LogDet: keep probes PD around the identity.
        let layout = BlockLayout::new(vec![2, 1]);
        let ld = LossModel::logdet(
            DMatrix::from_row_slice(3, 3, &[1.2, 0.1, 0.0, 0.1, 0.9, 0.2, 0.0, 0.2, 1.1]),
            layout.clone(),
            40,
        )
        .unwrap();
        for _ in 0..15 {
            let mut theta = layout.from_matrix(&DMatrix::identity(3, 3));
            for v in theta.iter_mut() {
                *v += rng.random_range(-0.15..0.15);
            }
            assert_grad_close(&ld, &theta);
        }
    }

    #[test]
    fn hessians_are_symmetric_and_psd_at_sampled_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let cat = LossModel::expfam(
            Arc::new(CategoricalBlocksFamily {
                block_sizes: vec![3, 2],
            }),
            DVector::from_element(5, 0.3),
            30,
        )
        .unwrap();
        let layout = BlockLayout::new(vec![1, 1, 1]);
        let ld = LossModel::logdet(DMatrix::identity(3, 3), layout.clone(), 40).unwrap();
        for loss in [&cat, &ld] {
            for _ in 0..10 {
                let theta = match loss {
                    LossModel::LogDet { .. } => {
                        let mut t = layout.from_matrix(&DMatrix::identity(3, 3));
                        for v in t.iter_mut() {
                            *v += rng.random_range(-0.1..0.1);
                        }
                        t
                    }
                    _ => DVector::from_fn(loss.dim(), |_, _| rng.random_range(-1.0..1.0)),
                };
                let h = loss.hessian(&theta).unwrap();
                let asym = (&h - h.transpose()).amax();
                assert!(asym < 1e-9, "asymmetric Hessian: {asym:.3e}");
                let eig = h.clone().symmetric_eigen();
                let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
                assert!(min > -1e-9, "Hessian not PSD: min eig {min:.3e}");
            }
        }
    }

    #[test]
    fn logdet_hessian_matches_finite_difference_of_gradient() {
        let layout = BlockLayout::new(vec![2, 1]);
        let sigma = DMatrix::from_row_slice(3, 3, &[1.5, 0.2, 0.1, 0.2, 1.0, 0.0, 0.1, 0.0, 0.8]);
        let loss = LossModel::logdet(sigma, layout.clone(), 20).unwrap();
        let mut theta = layout.from_matrix(&DMatrix::identity(3, 3));
        theta[1] = 0.2;
        let h = loss.hessian(&theta).unwrap();
        let eps = 1e-6;
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += eps;
            tm[k] -= eps;
            let col = (loss.grad(&tp).unwrap() - loss.grad(&tm).unwrap()) / (2.0 * eps);
            for r in 0..theta.len() {
                assert!(
                    (h[(r, k)] - col[r]).abs() < 1e-5,
                    "H[{r},{k}] = {} vs fd {}",
                    h[(r, k)],
                    col[r]
                );
            }
        }
    }

    #[test]
    fn logdet_hessian_at_identity_has_unit_minimum_eigenvalue() {
        let layout = BlockLayout::new(vec![1, 1, 1]);
        let loss = LossModel::logdet(DMatrix::identity(3, 3), layout.clone(), 10).unwrap();
        let theta = layout.from_matrix(&DMatrix::identity(3, 3));
        let h = loss.hessian(&theta).unwrap();
        let eig = h.symmetric_eigen();
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        assert!((min - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pair_groups_partition_the_triangle() {
        let layout = BlockLayout::new(vec![2, 2, 2]);
        let (groups, labels, diag) = layout.pair_groups();
        assert_eq!(groups.len(), 6);
        assert_eq!(labels.len(), 6);
        assert_eq!(diag.len(), 3);
        let mut seen = vec![false; layout.tri_dim];
        for g in &groups {
            for &i in g {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        // Round trip through the matrix form.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = DVector::from_fn(layout.tri_dim, |_, _| rng.random_range(-1.0..1.0));
        let m = layout.to_matrix(&theta);
        assert_eq!(m.transpose(), m);
        assert_eq!(layout.from_matrix(&m), theta);
    }
}

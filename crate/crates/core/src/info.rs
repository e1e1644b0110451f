//! Closed-form score vector, observed information matrix, and the asymptotic
//! limit of the normalized information.
//!
//! All quantities follow the canonical flat parameter ordering
//! `(mu_x_1..mu_x_m, alpha_2..alpha_p, beta_2..beta_p)`. The observed
//! information is returned unnormalized; callers that need `J/n` divide by the
//! total observation count themselves.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{compute_kernels, Measurements, ParameterVector, StudyDesign};

/// Observed information matrix `J(theta)`, the negative Hessian of the
/// log-likelihood, in canonical parameter ordering.
#[derive(Debug, Clone)]
pub struct InfoMatrix {
    full: DMatrix<f64>,
    n_levels: usize,
    n_labs: usize,
}

impl InfoMatrix {
    /// Wrap an externally computed information matrix in canonical ordering.
    pub fn from_full(full: DMatrix<f64>, n_levels: usize, n_labs: usize) -> Result<Self> {
        let dim = n_levels + 2 * (n_labs - 1);
        if full.nrows() != dim || full.ncols() != dim {
            return Err(Error::dim("information matrix", dim, full.nrows()));
        }
        Ok(InfoMatrix {
            full,
            n_levels,
            n_labs,
        })
    }

    pub fn full(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub fn dim(&self) -> usize {
        self.full.nrows()
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn n_labs(&self) -> usize {
        self.n_labs
    }

    /// Flat index of `mu_x[level]`.
    pub fn mu_index(&self, level: usize) -> usize {
        level
    }

    /// Flat index of `alpha` for a non-reference laboratory (`lab >= 1`).
    pub fn alpha_index(&self, lab: usize) -> usize {
        self.n_levels + lab - 1
    }

    /// Flat index of `beta` for a non-reference laboratory (`lab >= 1`).
    pub fn beta_index(&self, lab: usize) -> usize {
        self.n_levels + self.n_labs - 1 + lab - 1
    }

    /// The `2(p-1)` square block over the bias parameters only.
    pub fn bias_matrix(&self) -> DMatrix<f64> {
        let m = self.n_levels;
        let k = 2 * (self.n_labs - 1);
        DMatrix::from_fn(k, k, |r, c| self.full[(m + r, m + c)])
    }
}

/// Bias block of the observed information together with its inverse.
#[derive(Debug, Clone)]
pub struct BiasInformation {
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    n_labs: usize,
}

impl BiasInformation {
    /// Invert an externally supplied bias block (size `2(p-1)` square).
    pub fn new(matrix: DMatrix<f64>, n_labs: usize) -> Result<Self> {
        let k = 2 * (n_labs - 1);
        if matrix.nrows() != k || matrix.ncols() != k {
            return Err(Error::dim("bias block", k, matrix.nrows()));
        }
        invert_bias_matrix(matrix, n_labs)
    }

    /// The bias block itself.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// The inverse, whose entries are the `v` coefficients of the
    /// per-laboratory test statistics.
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Index of `alpha` for laboratory `lab >= 1` within the bias block.
    pub fn alpha_index(&self, lab: usize) -> usize {
        lab - 1
    }

    /// Index of `beta` for laboratory `lab >= 1` within the bias block.
    pub fn beta_index(&self, lab: usize) -> usize {
        self.n_labs - 1 + lab - 1
    }
}

/// Score vector (gradient of the log-likelihood) in canonical ordering.
pub fn score(
    theta: &ParameterVector,
    data: &Measurements,
    design: &StudyDesign,
) -> Result<Vec<f64>> {
    let kernels = compute_kernels(theta, data, design)?;
    let p = design.n_labs();
    let m = design.n_levels();
    let dim = m + 2 * (p - 1);
    let mut u = vec![0.0; dim];

    for j in 0..m {
        u[j] = kernels.m[j] / kernels.a[j] - theta.mu_x()[j] / design.sigma2_x()[j];
    }
    for lab in 1..p {
        let n_i = design.replicas()[lab] as f64;
        let beta_i = theta.beta_of(lab);
        let mut u_alpha = 0.0;
        let mut u_beta = 0.0;
        for j in 0..m {
            let s2 = design.sigma2(lab, j);
            let s2x = design.sigma2_x()[j];
            let a_j = kernels.a[j];
            let m_j = kernels.m[j];
            let d_ij = kernels.d[lab][j];
            u_alpha -= (n_i * beta_i * m_j * s2x / a_j - d_ij) / s2;
            u_beta -= s2x / (a_j * s2)
                * (n_i * beta_i + m_j * (n_i * beta_i * s2x * m_j / a_j - d_ij));
        }
        u[m + lab - 1] = u_alpha;
        u[m + (p - 1) + lab - 1] = u_beta;
    }
    Ok(u)
}

/// Observed information matrix `J(theta)` from its closed-form entries.
///
/// Cross-level entries over `mu_x` are exactly zero and the matrix is filled
/// symmetrically from shared subexpressions, so `J == J^T` holds exactly.
pub fn observed_information(
    theta: &ParameterVector,
    data: &Measurements,
    design: &StudyDesign,
) -> Result<InfoMatrix> {
    let kernels = compute_kernels(theta, data, design)?;
    let p = design.n_labs();
    let m = design.n_levels();
    let dim = m + 2 * (p - 1);
    let mut full = DMatrix::zeros(dim, dim);

    let a_idx = |lab: usize| m + lab - 1;
    let b_idx = |lab: usize| m + (p - 1) + lab - 1;

    for j in 0..m {
        let s2x = design.sigma2_x()[j];
        let a_j = kernels.a[j];
        let m_j = kernels.m[j];
        full[(j, j)] = (a_j - 1.0) / (s2x * a_j);
        for lab in 1..p {
            let n_i = design.replicas()[lab] as f64;
            let s2 = design.sigma2(lab, j);
            let beta_i = theta.beta_of(lab);
            let d_ij = kernels.d[lab][j];
            let j_mu_alpha = n_i * beta_i / (s2 * a_j);
            let j_mu_beta = (2.0 * n_i * beta_i * s2x * m_j / a_j - d_ij) / (s2 * a_j);
            full[(j, a_idx(lab))] = j_mu_alpha;
            full[(a_idx(lab), j)] = j_mu_alpha;
            full[(j, b_idx(lab))] = j_mu_beta;
            full[(b_idx(lab), j)] = j_mu_beta;
        }
    }

    for i in 1..p {
        let n_i = design.replicas()[i] as f64;
        let beta_i = theta.beta_of(i);
        for l in i..p {
            let n_l = design.replicas()[l] as f64;
            let beta_l = theta.beta_of(l);
            let mut j_aa = 0.0;
            let mut j_ab = 0.0; // d^2 wrt (alpha_i, beta_l)
            let mut j_ba = 0.0; // d^2 wrt (alpha_l, beta_i)
            let mut j_bb = 0.0;
            for j in 0..m {
                let s2x = design.sigma2_x()[j];
                let a_j = kernels.a[j];
                let m_j = kernels.m[j];
                let s2_i = design.sigma2(i, j);
                let s2_l = design.sigma2(l, j);
                let d_ij = kernels.d[i][j];
                let d_lj = kernels.d[l][j];
                if i == l {
                    j_aa += n_i / s2_i * (1.0 - n_i * beta_i * beta_i * s2x / (s2_i * a_j));
                    j_ab += n_i * s2x / (s2_i * a_j)
                        * (m_j
                            - beta_i / s2_i * (2.0 * n_i * beta_i * s2x * m_j / a_j - d_ij));
                    j_bb += s2x / (s2_i * a_j)
                        * (n_i - d_ij * d_ij / s2_i
                            + n_i * s2x / a_j
                                * (m_j
                                    * m_j
                                    * (1.0 - 4.0 * n_i * s2x * beta_i * beta_i / (s2_i * a_j))
                                    + 4.0 * beta_i * m_j * d_ij / s2_i
                                    - 2.0 * n_i * beta_i * beta_i / s2_i));
                } else {
                    j_aa -= n_i * n_l * beta_i * beta_l * s2x / (s2_i * s2_l * a_j);
                    j_ab += n_i * beta_i * s2x / (s2_i * s2_l * a_j)
                        * (d_lj - 2.0 * n_l * beta_l * s2x * m_j / a_j);
                    j_ba += n_l * beta_l * s2x / (s2_l * s2_i * a_j)
                        * (d_ij - 2.0 * n_i * beta_i * s2x * m_j / a_j);
                    j_bb -= s2x / (s2_i * s2_l * a_j)
                        * (d_ij * d_lj
                            + 2.0 * s2x / a_j
                                * (n_i * n_l * beta_i * beta_l
                                    * (1.0 + 2.0 * s2x * m_j * m_j / a_j)
                                    - n_i * beta_i * m_j * d_lj
                                    - n_l * beta_l * m_j * d_ij));
                }
            }
            full[(a_idx(i), a_idx(l))] = j_aa;
            full[(a_idx(l), a_idx(i))] = j_aa;
            full[(b_idx(i), b_idx(l))] = j_bb;
            full[(b_idx(l), b_idx(i))] = j_bb;
            if i == l {
                full[(a_idx(i), b_idx(i))] = j_ab;
                full[(b_idx(i), a_idx(i))] = j_ab;
            } else {
                full[(a_idx(i), b_idx(l))] = j_ab;
                full[(b_idx(l), a_idx(i))] = j_ab;
                full[(a_idx(l), b_idx(i))] = j_ba;
                full[(b_idx(i), a_idx(l))] = j_ba;
            }
        }
    }

    if full.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observed information"));
    }
    Ok(InfoMatrix {
        full,
        n_levels: m,
        n_labs: p,
    })
}

/// Condition threshold beyond which the bias block is treated as singular.
const MAX_CONDITION: f64 = 1e12;

/// Extract the bias block of the observed information and invert it.
///
/// The condition number is estimated from the singular values; blocks with
/// condition above 1e12 are rejected. One Newton refinement step tightens the
/// inverse so that `J_bias * inv` is the identity to near round-off.
pub fn bias_block(info: &InfoMatrix) -> Result<BiasInformation> {
    let matrix = info.bias_matrix();
    invert_bias_matrix(matrix, info.n_labs())
}

pub(crate) fn invert_bias_matrix(matrix: DMatrix<f64>, n_labs: usize) -> Result<BiasInformation> {
    let svd = matrix.clone().svd(false, false);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_min > 0.0) || s_max / s_min > MAX_CONDITION {
        return Err(Error::SingularInformation(format!(
            "bias information block has condition estimate {:.3e}",
            if s_min > 0.0 { s_max / s_min } else { f64::INFINITY }
        )));
    }
    let inverse = matrix
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularInformation("bias information block".into()))?;
    // Newton refinement: X <- X (2I - A X)
    let k = matrix.nrows();
    let refined = &inverse * (DMatrix::identity(k, k) * 2.0 - &matrix * &inverse);
    Ok(BiasInformation {
        matrix,
        inverse: refined,
        n_labs,
    })
}

/// Convention for the weights in the limit of the normalized information.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightConvention {
    /// Carry the limit fractions `w_i = lim n_i / n` through every sum. This is
    /// the actual limit of `J/n` and the default.
    Weighted,
    /// Drop all weight factors. This matches the simplified closed-form display
    /// of the limit entries and equals the weighted form times `p` when all
    /// weights are `1/p`.
    LiteralPrint,
}

/// Limit matrix of the normalized observed information.
///
/// Rows and columns indexed by any `mu_x` are exactly zero: the per-level true
/// values are measured on a single shared item, so information about their
/// means does not accumulate. The bias block depends only on the biases, the
/// latent values actually realized, the limit weights, and the variances.
#[derive(Debug, Clone)]
pub struct LimitMatrix {
    full: DMatrix<f64>,
    weights: Vec<f64>,
    x: Vec<f64>,
    n_levels: usize,
    n_labs: usize,
}

impl LimitMatrix {
    pub fn full(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Latent level values used in the entries.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// The `2(p-1)` square bias block.
    pub fn bias_matrix(&self) -> DMatrix<f64> {
        let m = self.n_levels;
        let k = 2 * (self.n_labs - 1);
        DMatrix::from_fn(k, k, |r, c| self.full[(m + r, m + c)])
    }
}

/// Evaluate the limit matrix at a bias configuration.
///
/// `theta` contributes only its bias components, `x` holds the `m` latent level
/// values, and `weights` the `p` limit fractions (positive, summing to one).
pub fn limit_matrix(
    theta: &ParameterVector,
    x: &[f64],
    weights: &[f64],
    design: &StudyDesign,
    convention: WeightConvention,
) -> Result<LimitMatrix> {
    let p = design.n_labs();
    let m = design.n_levels();
    theta.check_design(design)?;
    if x.len() != m {
        return Err(Error::dim("latent values", m, x.len()));
    }
    if weights.len() != p {
        return Err(Error::dim("limit weights", p, weights.len()));
    }
    for (i, &w) in weights.iter().enumerate() {
        if !(w > 0.0) {
            return Err(Error::InvalidInput(format!(
                "limit weight {i} must be positive, got {w}"
            )));
        }
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "limit weights must sum to 1, got {total}"
        )));
    }

    let w = |lab: usize| match convention {
        WeightConvention::Weighted => weights[lab],
        WeightConvention::LiteralPrint => 1.0,
    };

    // c_j = sum_q w_q beta_q^2 / sigma2_qj (reference has beta = 1)
    let c: Vec<f64> = (0..m)
        .map(|j| {
            (0..p)
                .map(|q| {
                    let beta_q = theta.beta_of(q);
                    w(q) * beta_q * beta_q / design.sigma2(q, j)
                })
                .sum()
        })
        .collect();

    let dim = m + 2 * (p - 1);
    let mut full = DMatrix::zeros(dim, dim);
    let a_idx = |lab: usize| m + lab - 1;
    let b_idx = |lab: usize| m + (p - 1) + lab - 1;

    for i in 1..p {
        let beta_i = theta.beta_of(i);
        for l in i..p {
            let beta_l = theta.beta_of(l);
            // moments of the per-level coefficient against 1, x, x^2
            let mut t = [0.0; 3];
            for j in 0..m {
                let s2_i = design.sigma2(i, j);
                let coeff = if i == l {
                    w(i) / s2_i - w(i) * w(i) * beta_i * beta_i / (s2_i * s2_i * c[j])
                } else {
                    let s2_l = design.sigma2(l, j);
                    -w(i) * w(l) * beta_i * beta_l / (s2_i * s2_l * c[j])
                };
                t[0] += coeff;
                t[1] += coeff * x[j];
                t[2] += coeff * x[j] * x[j];
            }
            full[(a_idx(i), a_idx(l))] = t[0];
            full[(a_idx(l), a_idx(i))] = t[0];
            full[(a_idx(i), b_idx(l))] = t[1];
            full[(b_idx(l), a_idx(i))] = t[1];
            full[(a_idx(l), b_idx(i))] = t[1];
            full[(b_idx(i), a_idx(l))] = t[1];
            full[(b_idx(i), b_idx(l))] = t[2];
            full[(b_idx(l), b_idx(i))] = t[2];
        }
    }

    Ok(LimitMatrix {
        full,
        weights: weights.to_vec(),
        x: x.to_vec(),
        n_levels: m,
        n_labs: p,
    })
}

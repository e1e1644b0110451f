//! Model data types and likelihood kernels.
//!
//! Laboratory `i = 0` is the reference (bias fixed at `alpha = 0`, `beta = 1`);
//! laboratories `1..p` carry free affine biases. Level `j` has a latent true
//! value with known variance `sigma2_x[j]`, and every (laboratory, level) cell
//! has a known error variance `sigma2[i][j]`.
//!
//! The joint density of all measurements at one level is normal with covariance
//! `D(sigma2_j) + sigma2_x[j] * b b^T`, where `b` stacks the per-laboratory
//! slopes. All likelihood quantities are evaluated through the rank-one
//! Sherman-Morrison identity, so no `n x n` matrix is ever formed: one
//! evaluation costs `O(p * m)` using the cached per-cell sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neumaier compensated accumulator for long sums of floats.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Study dimensions and all known variance components.
///
/// Variances are inputs, never estimated: each laboratory reports its combined
/// (type A + type B) uncertainty per level, and the latent per-level variances
/// come from the stability study of the item under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    /// Replica count per laboratory, `n_i`; index 0 is the reference laboratory.
    replicas: Vec<usize>,
    /// Latent true-value variance per level, length `m`.
    sigma2_x: Vec<f64>,
    /// Measurement error variance per (laboratory, level), `p` rows of length `m`.
    sigma2: Vec<Vec<f64>>,
}

impl StudyDesign {
    pub fn new(replicas: Vec<usize>, sigma2_x: Vec<f64>, sigma2: Vec<Vec<f64>>) -> Result<Self> {
        let p = replicas.len();
        let m = sigma2_x.len();
        if p < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 laboratories (reference + 1), got {p}"
            )));
        }
        if m < 1 {
            return Err(Error::InvalidInput("need at least 1 level".into()));
        }
        for (i, &n) in replicas.iter().enumerate() {
            if n < 1 {
                return Err(Error::InvalidInput(format!(
                    "laboratory {i} has replica count 0"
                )));
            }
        }
        for (j, &v) in sigma2_x.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "sigma2_x[{j}] = {v} must be positive and finite"
                )));
            }
        }
        if sigma2.len() != p {
            return Err(Error::dim("sigma2 rows", p, sigma2.len()));
        }
        for (i, row) in sigma2.iter().enumerate() {
            if row.len() != m {
                return Err(Error::dim(format!("sigma2 row {i}"), m, row.len()));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "sigma2[{i}][{j}] = {v} must be positive and finite"
                    )));
                }
            }
        }
        Ok(StudyDesign {
            replicas,
            sigma2_x,
            sigma2,
        })
    }

    /// Number of laboratories `p`, including the reference.
    pub fn n_labs(&self) -> usize {
        self.replicas.len()
    }

    /// Number of levels `m`.
    pub fn n_levels(&self) -> usize {
        self.sigma2_x.len()
    }

    pub fn replicas(&self) -> &[usize] {
        &self.replicas
    }

    /// Total observation count per level, `n = sum_i n_i`.
    pub fn n_total(&self) -> usize {
        self.replicas.iter().sum()
    }

    pub fn sigma2_x(&self) -> &[f64] {
        &self.sigma2_x
    }

    pub fn sigma2(&self, lab: usize, level: usize) -> f64 {
        self.sigma2[lab][level]
    }

    pub fn sigma2_rows(&self) -> &[Vec<f64>] {
        &self.sigma2
    }
}

/// Observed measurements `Y[lab][level][replicate]` with cached per-cell sums.
///
/// Every laboratory must report the same replicate count at each of its levels
/// (the count may differ between laboratories).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    y: Vec<Vec<Vec<f64>>>,
    sums: Vec<Vec<f64>>,
    sum_squares: Vec<Vec<f64>>,
}

impl Measurements {
    pub fn new(y: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let p = y.len();
        if p < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 laboratories, got {p}"
            )));
        }
        let m = y[0].len();
        if m < 1 {
            return Err(Error::InvalidInput("need at least 1 level".into()));
        }
        for (i, lab) in y.iter().enumerate() {
            if lab.len() != m {
                return Err(Error::dim(format!("levels of laboratory {i}"), m, lab.len()));
            }
            let n_i = lab[0].len();
            if n_i == 0 {
                return Err(Error::InvalidInput(format!(
                    "laboratory {i} has no replicates at level 0"
                )));
            }
            for (j, cell) in lab.iter().enumerate() {
                if cell.len() != n_i {
                    return Err(Error::dim(
                        format!("replicates of laboratory {i} at level {j}"),
                        n_i,
                        cell.len(),
                    ));
                }
                for (k, &v) in cell.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::InvalidInput(format!(
                            "non-finite measurement at laboratory {i}, level {j}, replicate {k}"
                        )));
                    }
                }
            }
        }
        let sums: Vec<Vec<f64>> = y
            .iter()
            .map(|lab| {
                lab.iter()
                    .map(|cell| compensated_sum(cell.iter().copied()))
                    .collect()
            })
            .collect();
        let sum_squares: Vec<Vec<f64>> = y
            .iter()
            .map(|lab| {
                lab.iter()
                    .map(|cell| compensated_sum(cell.iter().map(|v| v * v)))
                    .collect()
            })
            .collect();
        Ok(Measurements {
            y,
            sums,
            sum_squares,
        })
    }

    pub fn n_labs(&self) -> usize {
        self.y.len()
    }

    pub fn n_levels(&self) -> usize {
        self.y[0].len()
    }

    /// Replica count of one laboratory.
    pub fn replicas(&self, lab: usize) -> usize {
        self.y[lab][0].len()
    }

    /// Raw replicate values of one (laboratory, level) cell.
    pub fn cell(&self, lab: usize, level: usize) -> &[f64] {
        &self.y[lab][level]
    }

    /// Cached replicate sum `S_ij`.
    pub fn cell_sum(&self, lab: usize, level: usize) -> f64 {
        self.sums[lab][level]
    }

    /// Cached replicate sum of squares.
    pub fn cell_sum_squares(&self, lab: usize, level: usize) -> f64 {
        self.sum_squares[lab][level]
    }

    /// Verify that this data set matches a design exactly.
    pub fn check_design(&self, design: &StudyDesign) -> Result<()> {
        if self.n_labs() != design.n_labs() {
            return Err(Error::dim("laboratories", design.n_labs(), self.n_labs()));
        }
        if self.n_levels() != design.n_levels() {
            return Err(Error::dim("levels", design.n_levels(), self.n_levels()));
        }
        for i in 0..self.n_labs() {
            if self.replicas(i) != design.replicas()[i] {
                return Err(Error::dim(
                    format!("replicas of laboratory {i}"),
                    design.replicas()[i],
                    self.replicas(i),
                ));
            }
        }
        Ok(())
    }
}

/// Full parameter vector: level means plus per-laboratory affine biases.
///
/// The reference constraint `alpha_0 = 0`, `beta_0 = 1` is structural and never
/// stored: `alpha[k]`/`beta[k]` belong to laboratory `k + 1`. The canonical flat
/// ordering is `(mu_x_1..mu_x_m, alpha_2..alpha_p, beta_2..beta_p)`, length
/// `m + 2(p - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    mu_x: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl ParameterVector {
    pub fn new(mu_x: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if mu_x.is_empty() {
            return Err(Error::InvalidInput("mu_x must be non-empty".into()));
        }
        if alpha.is_empty() {
            return Err(Error::InvalidInput(
                "need at least one non-reference laboratory".into(),
            ));
        }
        if alpha.len() != beta.len() {
            return Err(Error::dim("beta length", alpha.len(), beta.len()));
        }
        Ok(ParameterVector { mu_x, alpha, beta })
    }

    /// Null-hypothesis parameters: every laboratory unbiased.
    pub fn null_bias(mu_x: Vec<f64>, n_labs: usize) -> Result<Self> {
        if n_labs < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 laboratories, got {n_labs}"
            )));
        }
        let k = n_labs - 1;
        ParameterVector::new(mu_x, vec![0.0; k], vec![1.0; k])
    }

    pub fn n_levels(&self) -> usize {
        self.mu_x.len()
    }

    pub fn n_labs(&self) -> usize {
        self.alpha.len() + 1
    }

    pub fn mu_x(&self) -> &[f64] {
        &self.mu_x
    }

    /// Additive biases of laboratories `1..p`.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Multiplicative biases of laboratories `1..p`.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Additive bias of a laboratory, with the structural 0 for the reference.
    pub fn alpha_of(&self, lab: usize) -> f64 {
        if lab == 0 {
            0.0
        } else {
            self.alpha[lab - 1]
        }
    }

    /// Multiplicative bias of a laboratory, with the structural 1 for the reference.
    pub fn beta_of(&self, lab: usize) -> f64 {
        if lab == 0 {
            1.0
        } else {
            self.beta[lab - 1]
        }
    }

    /// Length of the flat parameter vector, `m + 2(p - 1)`.
    pub fn dim(&self) -> usize {
        self.mu_x.len() + 2 * self.alpha.len()
    }

    /// Canonical flat ordering `(mu_x..., alpha..., beta...)`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.dim());
        flat.extend_from_slice(&self.mu_x);
        flat.extend_from_slice(&self.alpha);
        flat.extend_from_slice(&self.beta);
        flat
    }

    /// Rebuild from the canonical flat ordering.
    pub fn from_flat(n_levels: usize, n_labs: usize, flat: &[f64]) -> Result<Self> {
        let k = n_labs - 1;
        let expected = n_levels + 2 * k;
        if flat.len() != expected {
            return Err(Error::dim("flat parameter vector", expected, flat.len()));
        }
        ParameterVector::new(
            flat[..n_levels].to_vec(),
            flat[n_levels..n_levels + k].to_vec(),
            flat[n_levels + k..].to_vec(),
        )
    }

    /// The bias sub-vector `(alpha_2..alpha_p, beta_2..beta_p)`, length `2(p - 1)`.
    pub fn bias_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(2 * self.alpha.len());
        flat.extend_from_slice(&self.alpha);
        flat.extend_from_slice(&self.beta);
        flat
    }

    pub fn check_design(&self, design: &StudyDesign) -> Result<()> {
        if self.n_levels() != design.n_levels() {
            return Err(Error::dim("mu_x length", design.n_levels(), self.n_levels()));
        }
        if self.n_labs() != design.n_labs() {
            return Err(Error::dim(
                "bias length",
                design.n_labs() - 1,
                self.alpha.len(),
            ));
        }
        Ok(())
    }
}

/// Per-level likelihood kernels from which the log-likelihood, score, and
/// observed information are assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodKernels {
    /// `a_j = 1 + sigma2_x_j * sum_i n_i beta_i^2 / sigma2_ij`; always >= 1.
    pub a: Vec<f64>,
    /// `M_j = mu_x_j / sigma2_x_j + sum_i beta_i D_ij / sigma2_ij`.
    pub m: Vec<f64>,
    /// Centered cell sums `D_ij = S_ij - n_i alpha_i` (the reference has `D_0j = S_0j`).
    pub d: Vec<Vec<f64>>,
    /// Quadratic forms `Q_j = r^T Sigma_j^{-1} r`; always >= 0.
    pub q: Vec<f64>,
}

/// Evaluate the likelihood kernels `a_j`, `M_j`, `D_ij`, `Q_j` at `theta`.
///
/// `Q_j` uses the rank-one inverse
/// `Sigma_j^{-1} = D^{-1} - sigma2_x_j D^{-1} b b^T D^{-1} / a_j`,
/// reducing the quadratic form to cell sums; cost is `O(p)` per level.
pub fn compute_kernels(
    theta: &ParameterVector,
    data: &Measurements,
    design: &StudyDesign,
) -> Result<LikelihoodKernels> {
    theta.check_design(design)?;
    data.check_design(design)?;
    let p = design.n_labs();
    let m = design.n_levels();

    let mut a = Vec::with_capacity(m);
    let mut m_stat = Vec::with_capacity(m);
    let mut d = vec![vec![0.0; m]; p];
    let mut q = Vec::with_capacity(m);

    for j in 0..m {
        let s2x = design.sigma2_x()[j];

        let mut precision = CompensatedSum::default();
        let mut weighted = CompensatedSum::default();
        let mut residual_sq = CompensatedSum::default();
        let mut residual_proj = CompensatedSum::default();
        for i in 0..p {
            let n_i = design.replicas()[i] as f64;
            let s2 = design.sigma2(i, j);
            let beta_i = theta.beta_of(i);
            let alpha_i = theta.alpha_of(i);
            let s_ij = data.cell_sum(i, j);
            let ss_ij = data.cell_sum_squares(i, j);
            let d_ij = s_ij - n_i * alpha_i;
            d[i][j] = d_ij;

            precision.add(n_i * beta_i * beta_i / s2);
            weighted.add(beta_i * d_ij / s2);

            // residual against the mean alpha_i + beta_i * mu_x_j
            let mu_ij = alpha_i + beta_i * theta.mu_x()[j];
            residual_sq.add((ss_ij - 2.0 * mu_ij * s_ij + n_i * mu_ij * mu_ij) / s2);
            residual_proj.add(beta_i * (s_ij - n_i * mu_ij) / s2);
        }

        let a_j = 1.0 + s2x * precision.value();
        let m_j = theta.mu_x()[j] / s2x + weighted.value();
        let g_j = residual_proj.value();
        let q_raw = residual_sq.value() - s2x * g_j * g_j / a_j;
        if !a_j.is_finite() || !m_j.is_finite() || !q_raw.is_finite() {
            return Err(Error::NonFinite("likelihood kernels"));
        }
        // exact value is nonnegative; clamp the cancellation residue
        let q_j = q_raw.max(0.0);
        a.push(a_j);
        m_stat.push(m_j);
        q.push(q_j);
    }

    Ok(LikelihoodKernels {
        a,
        m: m_stat,
        d,
        q,
    })
}

/// Observed-data log-likelihood.
///
/// `L = -(m n / 2) ln 2 pi - (1/2) sum_j ln a_j - (1/2) sum_j sum_i n_i ln sigma2_ij
///  - (1/2) sum_j Q_j`, using `ln det Sigma_j = ln a_j + sum_i n_i ln sigma2_ij`.
pub fn log_likelihood(
    theta: &ParameterVector,
    data: &Measurements,
    design: &StudyDesign,
) -> Result<f64> {
    let kernels = compute_kernels(theta, data, design)?;
    let m = design.n_levels() as f64;
    let n = design.n_total() as f64;

    let mut acc = CompensatedSum::default();
    for j in 0..design.n_levels() {
        acc.add(kernels.a[j].ln());
        acc.add(kernels.q[j]);
        for i in 0..design.n_labs() {
            acc.add(design.replicas()[i] as f64 * design.sigma2(i, j).ln());
        }
    }
    let value = -0.5 * m * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * acc.value();
    if !value.is_finite() {
        return Err(Error::NonFinite("log-likelihood"));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two laboratories, one level, one replicate each, unit variances.
    pub(crate) fn toy_design() -> StudyDesign {
        StudyDesign::new(vec![1, 1], vec![1.0], vec![vec![1.0], vec![1.0]]).unwrap()
    }

    fn toy_theta() -> ParameterVector {
        ParameterVector::new(vec![0.0], vec![0.0], vec![1.0]).unwrap()
    }

    fn toy_data(y0: f64, y1: f64) -> Measurements {
        Measurements::new(vec![vec![vec![y0]], vec![vec![y1]]]).unwrap()
    }

    #[test]
    fn design_invariants_enforced() {
        assert!(StudyDesign::new(vec![1], vec![1.0], vec![vec![1.0]]).is_err());
        assert!(StudyDesign::new(vec![1, 0], vec![1.0], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(StudyDesign::new(vec![1, 1], vec![0.0], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(StudyDesign::new(vec![1, 1], vec![1.0], vec![vec![1.0], vec![-1.0]]).is_err());
        assert!(StudyDesign::new(vec![1, 1], vec![1.0], vec![vec![1.0]]).is_err());
    }

    #[test]
    fn measurements_reject_ragged_cells() {
        // second laboratory has 2 replicates at level 0 but 1 at level 1
        let y = vec![
            vec![vec![1.0], vec![2.0]],
            vec![vec![1.0, 1.5], vec![2.0]],
        ];
        assert!(Measurements::new(y).is_err());
    }

    #[test]
    fn toy_a_factor_is_three() {
        let kernels = compute_kernels(&toy_theta(), &toy_data(0.0, 0.0), &toy_design()).unwrap();
        assert!((kernels.a[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn centering_cancels_d() {
        // Y_ijk == alpha_i for the participant laboratory makes D vanish
        let design = toy_design();
        let theta = ParameterVector::new(vec![0.0], vec![4.5], vec![1.0]).unwrap();
        let data = toy_data(0.0, 4.5);
        let kernels = compute_kernels(&theta, &data, &design).unwrap();
        assert_eq!(kernels.d[1][0], 0.0);
    }

    #[test]
    fn toy_log_likelihood_values() {
        let design = toy_design();
        let theta = toy_theta();
        // y = (0, 0): L = -ln 2pi - ln(3)/2, Q = 0
        let l0 = log_likelihood(&theta, &toy_data(0.0, 0.0), &design).unwrap();
        let expected0 = -(2.0 * std::f64::consts::PI).ln() - 0.5 * 3.0_f64.ln();
        assert!((l0 - expected0).abs() < 1e-12);
        assert!((l0 - (-2.38719)).abs() < 1e-5);
        // y = (1, 1): quadratic form 2/3
        let l1 = log_likelihood(&theta, &toy_data(1.0, 1.0), &design).unwrap();
        assert!((l1 - (expected0 - 1.0 / 3.0)).abs() < 1e-12);
        assert!((l1 - (-2.72052)).abs() < 1e-5);
    }

    #[test]
    fn overflow_reports_non_finite() {
        let design = toy_design();
        let theta = ParameterVector::new(vec![1e200], vec![0.0], vec![1.0]).unwrap();
        let err = log_likelihood(&theta, &toy_data(0.0, 0.0), &design).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn flat_round_trip() {
        let theta = ParameterVector::new(vec![1.0, 2.0], vec![0.1, -0.2], vec![0.9, 1.1]).unwrap();
        let flat = theta.to_flat();
        assert_eq!(flat.len(), theta.dim());
        let back = ParameterVector::from_flat(2, 3, &flat).unwrap();
        assert_eq!(theta, back);
        assert_eq!(theta.bias_flat(), vec![0.1, -0.2, 0.9, 1.1]);
    }

    #[test]
    fn cached_sums_match_recomputation() {
        let data = Measurements::new(vec![
            vec![vec![0.1, 0.2, 0.3], vec![1.0, 2.0, 3.0]],
            vec![vec![5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0]],
        ])
        .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let naive: f64 = data.cell(i, j).iter().sum();
                assert!((data.cell_sum(i, j) - naive).abs() <= f64::EPSILON * naive.abs());
            }
        }
    }

    #[test]
    fn dimension_mismatch_names_offender() {
        let design = toy_design();
        let theta = ParameterVector::new(vec![0.0, 1.0], vec![0.0], vec![1.0]).unwrap();
        let err = compute_kernels(&theta, &toy_data(0.0, 0.0), &design).unwrap_err();
        assert!(err.to_string().contains("mu_x"));
    }
}

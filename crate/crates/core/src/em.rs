//! Maximum likelihood estimation via the closed-form EM iteration.
//!
//! The latent level values are the missing data. The E step needs only their
//! conditional means and second moments given the observations; the M step is
//! a weighted least squares of cell sums on those conditional means, available
//! in closed form per laboratory. Every iteration increases the observed-data
//! log-likelihood.

use crate::error::{Error, Result};
use crate::info::{bias_block, observed_information, score, BiasInformation, InfoMatrix};
use crate::model::{compute_kernels, log_likelihood, Measurements, ParameterVector, StudyDesign};

/// Stopping rule and initialization for the EM iteration.
#[derive(Debug, Clone)]
pub struct EmSettings {
    /// Relative log-likelihood change threshold, `|dL| / (1 + |L|)`.
    pub tol_loglik: f64,
    /// Maximum absolute parameter change threshold.
    pub tol_param: f64,
    /// Iteration cap; hitting it yields `converged = false`, not an error.
    pub max_iter: usize,
    /// Starting point; defaults to reference-lab cell means and unbiased labs.
    pub init: Option<ParameterVector>,
}

impl Default for EmSettings {
    fn default() -> Self {
        // EM converges linearly and the bias parameters can be weakly
        // identified, so the defaults are tight.
        EmSettings {
            tol_loglik: 1e-10,
            tol_param: 1e-8,
            max_iter: 10_000,
            init: None,
        }
    }
}

impl EmSettings {
    fn validate(&self) -> Result<()> {
        if !(self.tol_loglik > 0.0) || !(self.tol_param > 0.0) {
            return Err(Error::InvalidInput(
                "EM tolerances must be positive".into(),
            ));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of an EM fit: the MLE plus the diagnostics needed for inference.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: ParameterVector,
    /// Log-likelihood at the initial point and after each iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Observed information at the estimate, full parameter ordering.
    pub info: InfoMatrix,
    /// Bias block of the information and its inverse.
    pub bias_info: BiasInformation,
    /// Largest absolute score component at the estimate.
    pub score_sup: f64,
    /// Set for single-level designs, where the multiplicative bias is
    /// confounded with the additive bias.
    pub single_level: bool,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// E step: conditional mean and second moment of each latent level value.
///
/// `xhat_j = sigma2_x_j M_j / a_j` and `x2hat_j = sigma2_x_j / a_j + xhat_j^2`,
/// so `x2hat_j > xhat_j^2` always holds.
pub fn e_step(
    theta: &ParameterVector,
    data: &Measurements,
    design: &StudyDesign,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let kernels = compute_kernels(theta, data, design)?;
    let m = design.n_levels();
    let mut xhat = Vec::with_capacity(m);
    let mut x2hat = Vec::with_capacity(m);
    for j in 0..m {
        let s2x = design.sigma2_x()[j];
        let mean = s2x * kernels.m[j] / kernels.a[j];
        xhat.push(mean);
        x2hat.push(s2x / kernels.a[j] + mean * mean);
    }
    Ok((xhat, x2hat))
}

/// M step: closed-form update of the level means and laboratory biases.
///
/// For each laboratory the update is the weighted least squares of its cell
/// sums on `xhat` with weights `1 / sigma2_ij`; the level means update to
/// `xhat` directly.
pub fn m_step(
    xhat: &[f64],
    x2hat: &[f64],
    data: &Measurements,
    design: &StudyDesign,
) -> Result<ParameterVector> {
    let p = design.n_labs();
    let m = design.n_levels();
    if xhat.len() != m {
        return Err(Error::dim("xhat", m, xhat.len()));
    }
    if x2hat.len() != m {
        return Err(Error::dim("x2hat", m, x2hat.len()));
    }
    data.check_design(design)?;

    let mut alpha = Vec::with_capacity(p - 1);
    let mut beta = Vec::with_capacity(p - 1);
    for lab in 1..p {
        let n_i = design.replicas()[lab] as f64;
        let mut sw = 0.0;
        let mut sx = 0.0;
        let mut sxx = 0.0;
        let mut sy = 0.0;
        let mut sxy = 0.0;
        for j in 0..m {
            let w = 1.0 / design.sigma2(lab, j);
            let s_ij = data.cell_sum(lab, j);
            sw += w;
            sx += w * xhat[j];
            sxx += w * x2hat[j];
            sy += w * s_ij;
            sxy += w * xhat[j] * s_ij;
        }
        let denom = n_i * (sxx * sw - sx * sx);
        if !(denom.abs() > 1e-14 * n_i * (sxx * sw).abs()) || !denom.is_finite() {
            return Err(Error::SingularDesign { lab });
        }
        let b = (sxy * sw - sx * sy) / denom;
        let a = (sy - n_i * b * sx) / (n_i * sw);
        beta.push(b);
        alpha.push(a);
    }
    ParameterVector::new(xhat.to_vec(), alpha, beta)
}

/// Default starting point: reference-laboratory cell means for the levels and
/// unbiased participants, the natural neutral start under the null hypothesis.
pub fn default_init(data: &Measurements, design: &StudyDesign) -> ParameterVector {
    let m = design.n_levels();
    let n_ref = design.replicas()[0] as f64;
    let mu_x = (0..m).map(|j| data.cell_sum(0, j) / n_ref).collect();
    ParameterVector::null_bias(mu_x, design.n_labs()).expect("design has >= 2 laboratories")
}

/// Fit the model by EM.
///
/// Alternates E and M steps until both the relative log-likelihood change and
/// the maximum parameter change fall under their tolerances, or the iteration
/// cap is reached (in which case the result is returned with
/// `converged = false`). The trace retains the log-likelihood of every iterate.
pub fn fit_em(
    data: &Measurements,
    design: &StudyDesign,
    settings: &EmSettings,
) -> Result<FitResult> {
    settings.validate()?;
    data.check_design(design)?;

    let mut theta = match &settings.init {
        Some(init) => {
            init.check_design(design)?;
            init.clone()
        }
        None => default_init(data, design),
    };
    let mut loglik = log_likelihood(&theta, data, design)?;
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..settings.max_iter {
        let (xhat, x2hat) = e_step(&theta, data, design)?;
        let next = m_step(&xhat, &x2hat, data, design)?;
        let next_loglik = log_likelihood(&next, data, design)?;
        iterations += 1;
        trace.push(next_loglik);

        let param_change = theta
            .to_flat()
            .iter()
            .zip(next.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        let loglik_change = (next_loglik - loglik).abs() / (1.0 + next_loglik.abs());
        theta = next;
        loglik = next_loglik;
        if param_change <= settings.tol_param && loglik_change <= settings.tol_loglik {
            converged = true;
            break;
        }
    }

    let info = observed_information(&theta, data, design)?;
    let bias_info = bias_block(&info)?;
    let score_sup = score(&theta, data, design)?
        .iter()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max);

    Ok(FitResult {
        theta_hat: theta,
        loglik_trace: trace,
        iterations,
        converged,
        info,
        bias_info,
        score_sup,
        single_level: design.n_levels() == 1,
    })
}

//! Equivalence testing: chi-square special functions, Wald statistics (global,
//! composite, per-laboratory), familywise p-value adjustment, and joint
//! confidence-region geometry for the per-laboratory biases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::special::{normal_quantile, reg_gamma_pair};

/// Chi-square CDF, the regularized lower incomplete gamma P(df/2, x/2).
pub fn chi2_cdf(x: f64, df: usize) -> Result<f64> {
    if df < 1 {
        return Err(Error::Domain("chi-square needs df >= 1".into()));
    }
    if x < 0.0 {
        return Err(Error::Domain(format!(
            "chi-square CDF needs x >= 0, got {x}"
        )));
    }
    reg_gamma_pair(df as f64 / 2.0, x / 2.0).map(|(p, _)| p)
}

/// Chi-square upper tail 1 - CDF, computed on its accurate side.
pub fn chi2_sf(x: f64, df: usize) -> Result<f64> {
    if df < 1 {
        return Err(Error::Domain("chi-square needs df >= 1".into()));
    }
    if x < 0.0 {
        return Err(Error::Domain(format!(
            "chi-square tail needs x >= 0, got {x}"
        )));
    }
    reg_gamma_pair(df as f64 / 2.0, x / 2.0).map(|(_, q)| q)
}

/// Chi-square quantile: inverse of [`chi2_cdf`] by safeguarded Newton steps.
///
/// The Wilson-Hilferty cube-root approximation seeds the iteration; bisection
/// bounds guarantee progress. The result satisfies
/// `|chi2_cdf(result, df) - prob| <= 1e-10`.
pub fn chi2_quantile(prob: f64, df: usize) -> Result<f64> {
    if df < 1 {
        return Err(Error::Domain("chi-square needs df >= 1".into()));
    }
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::Domain(format!(
            "chi-square quantile needs prob in [0, 1), got {prob}"
        )));
    }
    if prob == 0.0 {
        return Ok(0.0);
    }
    let k = df as f64;
    let z = normal_quantile(prob);
    let wh = 1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt();
    let mut x = (k * wh * wh * wh).max(1e-12);

    // expand an upper bracket, keep a lower one
    let mut lo = 0.0;
    let mut hi = x.max(1.0);
    while chi2_cdf(hi, df)? < prob {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::NonFinite("chi-square quantile bracket"));
        }
    }
    x = x.clamp(lo, hi);

    let a = k / 2.0;
    let log_norm = -a * 2f64.ln() - crate::special::ln_gamma(a);
    for _ in 0..200 {
        let f = chi2_cdf(x, df)? - prob;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let log_pdf = (a - 1.0) * x.ln() - x / 2.0 + log_norm;
        let step = f / log_pdf.exp();
        let mut next = x - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-14 * (1.0 + x) {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

/// Outcome of one Wald test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Global equivalence test of all laboratories against the reference.
///
/// `Q_w = (bias_hat - bias_0)^T J_bias (bias_hat - bias_0)` with the null point
/// `bias_0 = (0, ..., 0, 1, ..., 1)`, asymptotically chi-square with `2(p-1)`
/// degrees of freedom.
pub fn wald_global(fit: &FitResult) -> Result<WaldTest> {
    let k = fit.bias_info.dim();
    let d = null_deviation(fit);
    let q = (d.transpose() * fit.bias_info.matrix() * &d)[(0, 0)].max(0.0);
    Ok(WaldTest {
        statistic: q,
        df: k,
        p_value: chi2_sf(q, k)?,
    })
}

/// Compound Wald test of `h(bias) = 0` given the contrast value and its
/// derivative matrix evaluated at the estimate.
///
/// `h_matrix` is `2(p-1) x r` with full column rank;
/// `Q_w = h^T [H^T J_bias^{-1} H]^{-1} h` is asymptotically chi-square with
/// `r` degrees of freedom.
pub fn wald_composite(
    fit: &FitResult,
    h_value: &[f64],
    h_matrix: &DMatrix<f64>,
) -> Result<WaldTest> {
    let k = fit.bias_info.dim();
    let r = h_value.len();
    if r == 0 || r > k {
        return Err(Error::InvalidInput(format!(
            "contrast dimension {r} must be in 1..={k}"
        )));
    }
    if h_matrix.nrows() != k || h_matrix.ncols() != r {
        return Err(Error::dim(
            "contrast matrix rows x cols",
            k * r,
            h_matrix.nrows() * h_matrix.ncols(),
        ));
    }
    let svd = h_matrix.clone().svd(false, false);
    let eps = svd.singular_values.max() * 1e-10 * k.max(r) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    if rank < r {
        return Err(Error::RankDeficient { rank, required: r });
    }

    let inner = h_matrix.transpose() * fit.bias_info.inverse() * h_matrix;
    let inner_svd = inner.clone().svd(false, false);
    let smin = inner_svd.singular_values.min();
    let smax = inner_svd.singular_values.max();
    if !(smin > 0.0) || smax / smin > 1e12 {
        return Err(Error::SingularInformation(
            "composite-test inner matrix".into(),
        ));
    }
    let inner_inv = inner
        .try_inverse()
        .ok_or_else(|| Error::SingularInformation("composite-test inner matrix".into()))?;
    let h = DVector::from_column_slice(h_value);
    let q = (h.transpose() * inner_inv * &h)[(0, 0)].max(0.0);
    Ok(WaldTest {
        statistic: q,
        df: r,
        p_value: chi2_sf(q, r)?,
    })
}

/// Per-laboratory equivalence test of `alpha_i = 0, beta_i = 1` (`lab >= 1`).
///
/// Written directly in the `v` coefficients of the inverted bias information:
/// `Q_wi = [(b-1)^2 v_aa - 2 a (b-1) v_ab + a^2 v_bb] / (v_aa v_bb - v_ab^2)`,
/// asymptotically chi-square with 2 degrees of freedom.
pub fn wald_individual(fit: &FitResult, lab: usize) -> Result<WaldTest> {
    let p = fit.theta_hat.n_labs();
    if lab == 0 || lab >= p {
        return Err(Error::InvalidInput(format!(
            "laboratory index must be in 1..{p}, got {lab} (0 is the reference)"
        )));
    }
    let v = fit.bias_info.inverse();
    let ia = fit.bias_info.alpha_index(lab);
    let ib = fit.bias_info.beta_index(lab);
    let v_aa = v[(ia, ia)];
    let v_ab = v[(ia, ib)];
    let v_bb = v[(ib, ib)];
    let det = v_aa * v_bb - v_ab * v_ab;
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::SingularInformation(format!(
            "per-laboratory variance block of laboratory {lab}"
        )));
    }
    let a_hat = fit.theta_hat.alpha()[lab - 1];
    let b_dev = fit.theta_hat.beta()[lab - 1] - 1.0;
    let q = ((b_dev * b_dev * v_aa - 2.0 * a_hat * b_dev * v_ab + a_hat * a_hat * v_bb) / det)
        .max(0.0);
    Ok(WaldTest {
        statistic: q,
        df: 2,
        p_value: chi2_sf(q, 2)?,
    })
}

/// Deviation of the estimated biases from the null point (0, ..., 0, 1, ..., 1).
fn null_deviation(fit: &FitResult) -> DVector<f64> {
    let k1 = fit.theta_hat.n_labs() - 1;
    let mut d = DVector::zeros(2 * k1);
    for (i, &a) in fit.theta_hat.alpha().iter().enumerate() {
        d[i] = a;
    }
    for (i, &b) in fit.theta_hat.beta().iter().enumerate() {
        d[k1 + i] = b - 1.0;
    }
    d
}

/// Built-in contrast for the global hypothesis: `h = bias_hat - bias_0`,
/// `H = I`. Feeding it to [`wald_composite`] reproduces [`wald_global`].
pub fn full_equivalence_contrast(fit: &FitResult) -> (Vec<f64>, DMatrix<f64>) {
    let k = fit.bias_info.dim();
    (null_deviation(fit).as_slice().to_vec(), DMatrix::identity(k, k))
}

/// Built-in contrast selecting one laboratory: `h = (alpha_i, beta_i - 1)`.
/// Feeding it to [`wald_composite`] reproduces [`wald_individual`].
pub fn lab_contrast(fit: &FitResult, lab: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let p = fit.theta_hat.n_labs();
    if lab == 0 || lab >= p {
        return Err(Error::InvalidInput(format!(
            "laboratory index must be in 1..{p}, got {lab}"
        )));
    }
    let k = fit.bias_info.dim();
    let mut h_matrix = DMatrix::zeros(k, 2);
    h_matrix[(fit.bias_info.alpha_index(lab), 0)] = 1.0;
    h_matrix[(fit.bias_info.beta_index(lab), 1)] = 1.0;
    let h = vec![
        fit.theta_hat.alpha()[lab - 1],
        fit.theta_hat.beta()[lab - 1] - 1.0,
    ];
    Ok((h, h_matrix))
}

/// Familywise p-value adjustment method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjustMethod {
    Bonferroni,
    Holm,
    Hochberg,
    Hommel,
}

impl AdjustMethod {
    pub const ALL: [AdjustMethod; 4] = [
        AdjustMethod::Bonferroni,
        AdjustMethod::Holm,
        AdjustMethod::Hochberg,
        AdjustMethod::Hommel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AdjustMethod::Bonferroni => "bonferroni",
            AdjustMethod::Holm => "holm",
            AdjustMethod::Hochberg => "hochberg",
            AdjustMethod::Hommel => "hommel",
        }
    }
}

impl std::str::FromStr for AdjustMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bonferroni" => Ok(AdjustMethod::Bonferroni),
            "holm" => Ok(AdjustMethod::Holm),
            "hochberg" => Ok(AdjustMethod::Hochberg),
            "hommel" => Ok(AdjustMethod::Hommel),
            other => Err(Error::InvalidInput(format!(
                "unknown adjustment method '{other}'"
            ))),
        }
    }
}

/// Adjust a vector of raw p-values for multiple testing.
///
/// Bonferroni and Holm are step-down, Hochberg is step-up, and Hommel follows
/// the closure shortcut over Simes local tests. Ties are handled
/// order-preservingly (stable sort).
pub fn adjust_pvalues(raw: &[f64], method: AdjustMethod) -> Result<Vec<f64>> {
    for &p in raw {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
        }
    }
    let n = raw.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw[a].partial_cmp(&raw[b]).expect("validated finite"));
    let sorted: Vec<f64> = order.iter().map(|&i| raw[i]).collect();

    let sorted_adj = match method {
        AdjustMethod::Bonferroni => {
            return Ok(raw.iter().map(|&p| (p * n as f64).min(1.0)).collect());
        }
        AdjustMethod::Holm => {
            let mut out = vec![0.0; n];
            let mut running = 0.0_f64;
            for i in 0..n {
                running = running.max(((n - i) as f64 * sorted[i]).min(1.0));
                out[i] = running;
            }
            out
        }
        AdjustMethod::Hochberg => {
            let mut out = vec![0.0; n];
            let mut running = 1.0_f64;
            for i in (0..n).rev() {
                running = running.min(((n - i) as f64 * sorted[i]).min(1.0));
                out[i] = running;
            }
            out
        }
        AdjustMethod::Hommel => hommel_sorted(&sorted),
    };

    let mut out = vec![0.0; n];
    for (rank, &orig) in order.iter().enumerate() {
        out[orig] = sorted_adj[rank];
    }
    Ok(out)
}

/// Hommel adjustment on already-sorted p-values (Wright's algorithm).
fn hommel_sorted(ps: &[f64]) -> Vec<f64> {
    let n = ps.len();
    let init = (0..n)
        .map(|i| n as f64 * ps[i] / (i + 1) as f64)
        .fold(f64::INFINITY, f64::min);
    let mut q = vec![init; n];
    let mut pa = vec![init; n];
    for m in (2..n).rev() {
        // tail block: indices n-m+1 .. n-1 with divisors 2..=m
        let mf = m as f64;
        let q1 = (0..m - 1)
            .map(|s| mf * ps[n - m + 1 + s] / (s + 2) as f64)
            .fold(f64::INFINITY, f64::min);
        for i in 0..=(n - m) {
            q[i] = (mf * ps[i]).min(q1);
        }
        let head = q[n - m];
        for item in q.iter_mut().take(n).skip(n - m + 1) {
            *item = head;
        }
        for i in 0..n {
            pa[i] = pa[i].max(q[i]);
        }
    }
    (0..n).map(|i| pa[i].max(ps[i]).min(1.0)).collect()
}

/// Joint confidence ellipse for one laboratory's bias pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    /// Laboratory index (>= 1; 0 is the reference).
    pub lab: usize,
    /// Center `(alpha_hat, beta_hat)`.
    pub center: [f64; 2],
    /// The `(alpha, beta)` block of the inverted bias information.
    pub shape: [[f64; 2]; 2],
    /// Per-laboratory confidence level after Bonferroni division.
    pub level: f64,
    /// Chi-square(2) quantile at `level`.
    pub radius2: f64,
    /// Ordered closed polyline on the boundary; first and last points coincide.
    pub boundary: Vec<[f64; 2]>,
}

impl EllipseSpec {
    /// Whether a point lies inside or on the ellipse.
    pub fn contains(&self, point: [f64; 2]) -> bool {
        let dx = point[0] - self.center[0];
        let dy = point[1] - self.center[1];
        let [[a, b], [_, c]] = self.shape;
        let det = a * c - b * b;
        // (dx, dy) shape^{-1} (dx, dy)^T
        let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        q <= self.radius2
    }
}

/// Number of boundary points on each emitted ellipse (plus the closing point).
const ELLIPSE_POINTS: usize = 128;

/// Bonferroni-corrected joint confidence region for one laboratory.
///
/// The per-laboratory level is `1 - (1 - familywise_level) / comparisons`; the
/// boundary comes from the eigen-decomposition of the 2x2 shape block.
pub fn confidence_ellipse(
    fit: &FitResult,
    lab: usize,
    familywise_level: f64,
    comparisons: usize,
) -> Result<EllipseSpec> {
    let p = fit.theta_hat.n_labs();
    if lab == 0 || lab >= p {
        return Err(Error::InvalidInput(format!(
            "laboratory index must be in 1..{p}, got {lab}"
        )));
    }
    if !(familywise_level > 0.0 && familywise_level < 1.0) {
        return Err(Error::InvalidInput(format!(
            "familywise level must be in (0, 1), got {familywise_level}"
        )));
    }
    if comparisons < 1 {
        return Err(Error::InvalidInput("comparisons must be >= 1".into()));
    }

    let level = 1.0 - (1.0 - familywise_level) / comparisons as f64;
    let radius2 = chi2_quantile(level, 2)?;

    let v = fit.bias_info.inverse();
    let ia = fit.bias_info.alpha_index(lab);
    let ib = fit.bias_info.beta_index(lab);
    let (s_aa, s_ab, s_bb) = (v[(ia, ia)], v[(ia, ib)], v[(ib, ib)]);

    // closed-form eigen-decomposition of the symmetric 2x2 shape block
    let half_trace = 0.5 * (s_aa + s_bb);
    let disc = (0.25 * (s_aa - s_bb) * (s_aa - s_bb) + s_ab * s_ab).sqrt();
    let l1 = half_trace + disc;
    let l2 = half_trace - disc;
    if !(l2 > 0.0) || !l1.is_finite() {
        return Err(Error::SingularInformation(format!(
            "confidence-region shape block of laboratory {lab} is not positive definite"
        )));
    }
    let (u1, u2) = if s_ab.abs() > 1e-300 * (s_aa.abs() + s_bb.abs()) {
        let v1 = [l1 - s_bb, s_ab];
        let norm = (v1[0] * v1[0] + v1[1] * v1[1]).sqrt();
        ([v1[0] / norm, v1[1] / norm], [-v1[1] / norm, v1[0] / norm])
    } else if s_aa >= s_bb {
        ([1.0, 0.0], [0.0, 1.0])
    } else {
        ([0.0, 1.0], [1.0, 0.0])
    };

    let center = [
        fit.theta_hat.alpha()[lab - 1],
        fit.theta_hat.beta()[lab - 1],
    ];
    let r = radius2.sqrt();
    let (r1, r2) = (r * l1.sqrt(), r * l2.sqrt());
    let mut boundary = Vec::with_capacity(ELLIPSE_POINTS + 1);
    for t in 0..ELLIPSE_POINTS {
        let phi = 2.0 * std::f64::consts::PI * t as f64 / ELLIPSE_POINTS as f64;
        let (s, c) = phi.sin_cos();
        boundary.push([
            center[0] + r1 * c * u1[0] + r2 * s * u2[0],
            center[1] + r1 * c * u1[1] + r2 * s * u2[1],
        ]);
    }
    boundary.push(boundary[0]);

    Ok(EllipseSpec {
        lab,
        center,
        shape: [[s_aa, s_ab], [s_ab, s_bb]],
        level,
        radius2,
        boundary,
    })
}

/// One laboratory's row in the equivalence test table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabTest {
    /// Laboratory index (>= 1; 0 is the reference).
    pub lab: usize,
    pub q_w: f64,
    pub df: usize,
    pub p_raw: f64,
    pub p_holm: f64,
    pub p_hochberg: f64,
    pub p_hommel: f64,
    pub p_bonferroni: f64,
    /// Verdict at the familywise level under the report's selected method.
    pub reject: bool,
}

impl LabTest {
    pub fn p_adjusted(&self, method: AdjustMethod) -> f64 {
        match method {
            AdjustMethod::Bonferroni => self.p_bonferroni,
            AdjustMethod::Holm => self.p_holm,
            AdjustMethod::Hochberg => self.p_hochberg,
            AdjustMethod::Hommel => self.p_hommel,
        }
    }
}

/// Global and per-laboratory Wald tests with familywise-adjusted p-values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldReport {
    pub q_global: f64,
    pub df_global: usize,
    pub p_global: f64,
    pub labs: Vec<LabTest>,
    /// Method used for the verdicts.
    pub method: AdjustMethod,
    /// Familywise error level of the verdicts.
    pub alpha: f64,
}

/// Run the global test plus all per-laboratory tests and adjust the p-values.
///
/// Verdicts reject a laboratory when its adjusted p-value (under `method`) is
/// at most `alpha`.
pub fn wald_report(fit: &FitResult, method: AdjustMethod, alpha: f64) -> Result<WaldReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "familywise alpha must be in (0, 1), got {alpha}"
        )));
    }
    let global = wald_global(fit)?;
    let p = fit.theta_hat.n_labs();
    let per_lab: Vec<WaldTest> = (1..p)
        .map(|lab| wald_individual(fit, lab))
        .collect::<Result<_>>()?;
    let raw: Vec<f64> = per_lab.iter().map(|t| t.p_value).collect();
    let holm = adjust_pvalues(&raw, AdjustMethod::Holm)?;
    let hochberg = adjust_pvalues(&raw, AdjustMethod::Hochberg)?;
    let hommel = adjust_pvalues(&raw, AdjustMethod::Hommel)?;
    let bonferroni = adjust_pvalues(&raw, AdjustMethod::Bonferroni)?;

    let labs = per_lab
        .iter()
        .enumerate()
        .map(|(idx, t)| {
            let row = LabTest {
                lab: idx + 1,
                q_w: t.statistic,
                df: t.df,
                p_raw: t.p_value,
                p_holm: holm[idx],
                p_hochberg: hochberg[idx],
                p_hommel: hommel[idx],
                p_bonferroni: bonferroni[idx],
                reject: false,
            };
            let adjusted = row.p_adjusted(method);
            LabTest {
                reject: adjusted <= alpha,
                ..row
            }
        })
        .collect();

    Ok(WaldReport {
        q_global: global.statistic,
        df_global: global.df,
        p_global: global.p_value,
        labs,
        method,
        alpha,
    })
}

/// Format a p-value the way the report tables print it: six decimals, with
/// anything below 5e-7 shown as 0.000000. Full precision is kept internally.
pub fn format_p6(p: f64) -> String {
    if p < 5e-7 {
        "0.000000".to_string()
    } else {
        format!("{p:.6}")
    }
}

//! Shared oracles for the integration tests.
//!
//! Everything here recomputes model quantities by an independent route (dense
//! linear algebra, finite differences, enumeration, quadrature, direct search)
//! so the closed-form implementations have something honest to be checked
//! against. Nothing in this module calls the kernel-based fast paths it is
//! used to verify.

#![allow(dead_code)]

use labeq::model::{Measurements, ParameterVector, StudyDesign};
use labeq::sim::{simulate_dataset, TrueParameters};
use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// randomness for test instances

pub fn rng(seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 / 9_007_199_254_740_992.0;
    lo + (hi - lo) * u
}

pub fn uniform_usize(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() as usize) % (hi - lo + 1)
}

/// A random small model instance with data drawn from its own truth.
pub struct Instance {
    pub design: StudyDesign,
    pub theta: ParameterVector,
    pub data: Measurements,
}

/// Random instance with `p <= max_p`, `2 <= m <= max_m`, `n_i <= max_n`.
pub fn random_instance(seed: u64, max_p: usize, max_m: usize, max_n: usize) -> Instance {
    let mut r = rng(seed);
    let p = uniform_usize(&mut r, 2, max_p);
    let m = uniform_usize(&mut r, 2, max_m);
    let replicas: Vec<usize> = (0..p).map(|_| uniform_usize(&mut r, 1, max_n)).collect();
    let sigma2_x: Vec<f64> = (0..m).map(|_| uniform(&mut r, 0.05, 0.5)).collect();
    let sigma2: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..m).map(|_| uniform(&mut r, 0.02, 0.4)).collect())
        .collect();
    let design = StudyDesign::new(replicas, sigma2_x, sigma2).unwrap();
    let mu_x: Vec<f64> = (0..m).map(|j| uniform(&mut r, -1.0, 1.0) + 2.0 * j as f64).collect();
    let alpha: Vec<f64> = (1..p).map(|_| uniform(&mut r, -0.4, 0.4)).collect();
    let beta: Vec<f64> = (1..p).map(|_| uniform(&mut r, 0.7, 1.3)).collect();
    let theta = ParameterVector::new(mu_x, alpha, beta).unwrap();
    let truth = TrueParameters::new(theta.clone(), design.clone()).unwrap();
    let data = simulate_dataset(&truth, r.next_u64());
    Instance { design, theta, data }
}

/// Data generated at a fixed latent vector `x` (no latent draw), used for the
/// convergence checks of the normalized information matrix.
pub fn simulate_fixed_latent(
    theta: &ParameterVector,
    design: &StudyDesign,
    x: &[f64],
    seed: u64,
) -> Measurements {
    let mut r = rng(seed);
    let mut y = Vec::with_capacity(design.n_labs());
    for i in 0..design.n_labs() {
        let mut lab = Vec::with_capacity(design.n_levels());
        for (j, &x_j) in x.iter().enumerate() {
            let mean = theta.alpha_of(i) + theta.beta_of(i) * x_j;
            let sd = design.sigma2(i, j).sqrt();
            lab.push(
                (0..design.replicas()[i])
                    .map(|_| mean + sd * gauss(&mut r))
                    .collect::<Vec<f64>>(),
            );
        }
        y.push(lab);
    }
    Measurements::new(y).unwrap()
}

/// Standard normal by inverse CDF of a 53-bit uniform (test-local copy).
pub fn gauss(r: &mut ChaCha8Rng) -> f64 {
    let u = ((r.next_u64() >> 11) as f64 + 0.5) / 9_007_199_254_740_992.0;
    // Beasley-Springer-Moro style rational approximation is enough for
    // test-data generation; accuracy here does not gate any assertion.
    inverse_normal(u)
}

fn inverse_normal(p: f64) -> f64 {
    // Acklam's rational approximation, |error| < 1.15e-9
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let plow = 0.02425;
    if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

// ---------------------------------------------------------------------------
// dense multivariate-normal oracle

/// Stacked mean vector and dense covariance of one level's observations.
pub fn dense_level_moments(
    theta: &ParameterVector,
    design: &StudyDesign,
    level: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let n: usize = design.replicas().iter().sum();
    let mut mean = DVector::zeros(n);
    let mut slope = DVector::zeros(n);
    let mut noise = DVector::zeros(n);
    let mut row = 0;
    for i in 0..design.n_labs() {
        for _ in 0..design.replicas()[i] {
            mean[row] = theta.alpha_of(i) + theta.beta_of(i) * theta.mu_x()[level];
            slope[row] = theta.beta_of(i);
            noise[row] = design.sigma2(i, level);
            row += 1;
        }
    }
    let mut cov = &slope * slope.transpose() * design.sigma2_x()[level];
    for k in 0..n {
        cov[(k, k)] += noise[k];
    }
    (mean, cov)
}

fn stacked_level(data: &Measurements, level: usize) -> DVector<f64> {
    let mut out = Vec::new();
    for i in 0..data.n_labs() {
        out.extend_from_slice(data.cell(i, level));
    }
    DVector::from_vec(out)
}

/// Log-likelihood evaluated through the explicit n x n covariance per level.
pub fn dense_log_likelihood(
    theta: &ParameterVector,
    data: &Measurements,
    design: &StudyDesign,
) -> f64 {
    let mut total = 0.0;
    for j in 0..design.n_levels() {
        let (mean, cov) = dense_level_moments(theta, design, j);
        let y = stacked_level(data, j);
        let n = y.len() as f64;
        let chol = cov.cholesky().expect("dense covariance is SPD");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let centered = &y - &mean;
        let solved = chol.solve(&centered);
        let quad = centered.dot(&solved);
        total += -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * quad;
    }
    total
}

/// Conditional mean and variance of the latent value given one level's data,
/// from the dense joint normal of (x_j, Y_j).
pub fn dense_conditional_moments(
    theta: &ParameterVector,
    data: &Measurements,
    design: &StudyDesign,
    level: usize,
) -> (f64, f64) {
    let (mean, cov) = dense_level_moments(theta, design, level);
    let y = stacked_level(data, level);
    let n = y.len();
    let s2x = design.sigma2_x()[level];
    // cov(x_j, Y) = sigma2_x * slope
    let mut cross = DVector::zeros(n);
    let mut row = 0;
    for i in 0..design.n_labs() {
        for _ in 0..design.replicas()[i] {
            cross[row] = s2x * theta.beta_of(i);
            row += 1;
        }
    }
    let chol = cov.cholesky().expect("dense covariance is SPD");
    let solved = chol.solve(&cross);
    let cond_mean = theta.mu_x()[level] + solved.dot(&(&y - &mean));
    let cond_var = s2x - solved.dot(&cross);
    (cond_mean, cond_var)
}

// ---------------------------------------------------------------------------
// finite differences

fn eval_flat(design: &StudyDesign, data: &Measurements, flat: &[f64]) -> f64 {
    let theta =
        ParameterVector::from_flat(design.n_levels(), design.n_labs(), flat).unwrap();
    labeq::log_likelihood(&theta, data, design).unwrap()
}

/// Central finite-difference gradient with per-coordinate step
/// `1e-6 (1 + |theta_q|)`.
pub fn fd_gradient(theta: &ParameterVector, data: &Measurements, design: &StudyDesign) -> Vec<f64> {
    let flat = theta.to_flat();
    (0..flat.len())
        .map(|q| {
            let h = 1e-6 * (1.0 + flat[q].abs());
            let mut plus = flat.clone();
            plus[q] += h;
            let mut minus = flat.clone();
            minus[q] -= h;
            (eval_flat(design, data, &plus) - eval_flat(design, data, &minus)) / (2.0 * h)
        })
        .collect()
}

/// Central finite-difference Hessian with per-coordinate step
/// `1e-4 (1 + |theta_q|)`.
pub fn fd_hessian(
    theta: &ParameterVector,
    data: &Measurements,
    design: &StudyDesign,
) -> DMatrix<f64> {
    let flat = theta.to_flat();
    let d = flat.len();
    let step: Vec<f64> = flat.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let mut h = DMatrix::zeros(d, d);
    for q in 0..d {
        for r in q..d {
            let mut pp = flat.clone();
            pp[q] += step[q];
            pp[r] += step[r];
            let mut pm = flat.clone();
            pm[q] += step[q];
            pm[r] -= step[r];
            let mut mp = flat.clone();
            mp[q] -= step[q];
            mp[r] += step[r];
            let mut mm = flat.clone();
            mm[q] -= step[q];
            mm[r] -= step[r];
            let value = (eval_flat(design, data, &pp) - eval_flat(design, data, &pm)
                - eval_flat(design, data, &mp)
                + eval_flat(design, data, &mm))
                / (4.0 * step[q] * step[r]);
            h[(q, r)] = value;
            h[(r, q)] = value;
        }
    }
    h
}

// ---------------------------------------------------------------------------
// derivative-free direct search

/// Compass search maximizer: greedy coordinate moves with step halving.
///
/// Returns the best point and value found. Independent of the EM path; only
/// the objective is shared.
pub fn compass_maximize(
    objective: impl Fn(&[f64]) -> f64,
    start: &[f64],
    init_step: f64,
    min_step: f64,
) -> (Vec<f64>, f64) {
    let mut point = start.to_vec();
    let mut best = objective(&point);
    let mut step = init_step;
    while step > min_step {
        let mut improved_at_step = true;
        let mut sweeps = 0;
        while improved_at_step && sweeps < 400 {
            improved_at_step = false;
            sweeps += 1;
            for q in 0..point.len() {
                for sign in [1.0, -1.0] {
                    let mut candidate = point.clone();
                    candidate[q] += sign * step;
                    let value = objective(&candidate);
                    if value > best {
                        best = value;
                        point = candidate;
                        improved_at_step = true;
                    }
                }
            }
        }
        step *= 0.5;
    }
    (point, best)
}

// ---------------------------------------------------------------------------
// small-matrix oracles

/// Determinant by cofactor expansion (sizes used in tests are <= 4).
pub fn det_cofactor(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 1 {
        return a[(0, 0)];
    }
    let mut det = 0.0;
    for c in 0..n {
        let minor = a.clone().remove_row(0).remove_column(c);
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * a[(0, c)] * det_cofactor(&minor);
    }
    det
}

/// Inverse through the adjugate, an independent route for sizes <= 4.
pub fn adjugate_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let det = det_cofactor(a);
    let mut adj = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let minor = a.clone().remove_row(r).remove_column(c);
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            adj[(c, r)] = sign * det_cofactor(&minor);
        }
    }
    adj / det
}

/// Weighted least squares of `y` on `(1, x)` solved through the explicit 2x2
/// normal equations, the oracle for the M-step closed forms.
pub fn wls_line_oracle(x: &[f64], x2: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let mut a = [[0.0; 2]; 2];
    let mut b = [0.0; 2];
    for j in 0..x.len() {
        a[0][0] += w[j];
        a[0][1] += w[j] * x[j];
        a[1][1] += w[j] * x2[j];
        b[0] += w[j] * y[j];
        b[1] += w[j] * x[j] * y[j];
    }
    a[1][0] = a[0][1];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let intercept = (b[0] * a[1][1] - a[0][1] * b[1]) / det;
    let slope = (a[0][0] * b[1] - a[1][0] * b[0]) / det;
    (intercept, slope)
}

// ---------------------------------------------------------------------------
// quadrature and closure oracles

/// Adaptive Simpson integration.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let fa = f(lo);
    let fb = f(hi);
    let fm = f(0.5 * (lo + hi));
    let whole = simpson(lo, hi, fa, fm, fb);
    recurse(&f, lo, hi, fa, fm, fb, whole, tol, 60)
}

/// Chi-square density for the quadrature oracle.
pub fn chi2_density(df: usize) -> impl Fn(f64) -> f64 {
    let k = df as f64 / 2.0;
    // Gamma(k) for integer and half-integer k via recursion from 1 or sqrt(pi)
    let mut gamma = if df % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut arg = if df % 2 == 0 { 1.0 } else { 0.5 };
    while arg < k - 0.25 {
        gamma *= arg;
        arg += 1.0;
    }
    move |x: f64| {
        if x <= 0.0 {
            0.0
        } else {
            x.powf(k - 1.0) * (-x / 2.0).exp() / (2f64.powf(k) * gamma)
        }
    }
}

/// Brute-force closure testing over all intersection hypotheses with Simes
/// local tests; the oracle Hommel's shortcut must reproduce (k <= ~16).
pub fn simes_closure_adjust(raw: &[f64]) -> Vec<f64> {
    let k = raw.len();
    let mut adjusted = vec![0.0_f64; k];
    for mask in 1u32..(1 << k) {
        let subset: Vec<f64> = (0..k)
            .filter(|&i| mask & (1 << i) != 0)
            .map(|i| raw[i])
            .collect();
        let mut sorted = subset.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let card = sorted.len() as f64;
        let simes_p = sorted
            .iter()
            .enumerate()
            .map(|(t, &p)| card * p / (t + 1) as f64)
            .fold(f64::INFINITY, f64::min);
        for i in 0..k {
            if mask & (1 << i) != 0 {
                adjusted[i] = adjusted[i].max(simes_p);
            }
        }
    }
    adjusted.iter().map(|&p| p.min(1.0)).collect()
}

//! Data generation under the model and Monte Carlo size/power studies.
//!
//! Randomness is fully deterministic: every replication derives its own
//! ChaCha8 stream from `mix(master_seed, replication_index)`, and normal
//! variates come from the inverse CDF, so parallel and serial runs (and
//! repeated runs on any platform) produce identical results.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_em, EmSettings};
use crate::error::{Error, Result};
use crate::inference::{chi2_quantile, wald_global, wald_individual};
use crate::model::{Measurements, ParameterVector, StudyDesign};
use crate::special::normal_quantile;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a stream index.
///
/// Distinct indices give decorrelated streams; the construction is the
/// standard splittable-seed mix, so the derivation can be nested.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix(master.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Deterministic ChaCha8 stream keyed from a 64-bit seed.
pub(crate) fn stream(seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_exact_mut(8) {
        s = s.wrapping_add(GOLDEN);
        chunk.copy_from_slice(&mix(s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard normal draw via the inverse CDF (no rejection branches).
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // 53-bit uniform strictly inside (0, 1)
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0);
    normal_quantile(u)
}

/// The three benchmark measurement-error regimes: per-level error standard
/// deviations `scale * level_index` with scale 0.1, 0.2, or 0.3, shared by all
/// laboratories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceRegime {
    A,
    B,
    C,
}

impl VarianceRegime {
    pub fn scale(&self) -> f64 {
        match self {
            VarianceRegime::A => 0.1,
            VarianceRegime::B => 0.2,
            VarianceRegime::C => 0.3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            VarianceRegime::A => "a",
            VarianceRegime::B => "b",
            VarianceRegime::C => "c",
        }
    }
}

impl std::str::FromStr for VarianceRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(VarianceRegime::A),
            "b" => Ok(VarianceRegime::B),
            "c" => Ok(VarianceRegime::C),
            other => Err(Error::InvalidInput(format!(
                "unknown variance regime '{other}' (expected a, b, or c)"
            ))),
        }
    }
}

/// Generating truth for a simulation: parameters plus the generating design.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueParameters {
    pub theta: ParameterVector,
    pub design: StudyDesign,
}

impl TrueParameters {
    pub fn new(theta: ParameterVector, design: StudyDesign) -> Result<Self> {
        theta.check_design(&design)?;
        Ok(TrueParameters { theta, design })
    }

    /// The benchmark null configuration: five laboratories, five levels, level
    /// means (10, 20, 30, 40, 50), latent standard deviations
    /// (0.24, 0.31, 0.38, 0.45, 0.52), all laboratories unbiased, and the
    /// chosen error regime at `replicas` replicas per laboratory.
    pub fn benchmark(regime: VarianceRegime, replicas: usize) -> TrueParameters {
        let p = 5;
        let mu_x: Vec<f64> = (1..=5).map(|j| 10.0 * j as f64).collect();
        let sd_x = [0.24, 0.31, 0.38, 0.45, 0.52];
        let sigma2_x: Vec<f64> = sd_x.iter().map(|s| s * s).collect();
        let scale = regime.scale();
        let row: Vec<f64> = (1..=5).map(|j| (scale * j as f64).powi(2)).collect();
        let design = StudyDesign::new(vec![replicas; p], sigma2_x, vec![row; p])
            .expect("benchmark design is valid");
        let theta =
            ParameterVector::null_bias(mu_x, p).expect("benchmark parameters are valid");
        TrueParameters { theta, design }
    }

    /// Copy of this truth with `alpha += d` and `beta += d` applied to the
    /// given non-reference laboratories.
    pub fn perturbed(&self, labs: &[usize], d: f64) -> Result<TrueParameters> {
        let mut alpha = self.theta.alpha().to_vec();
        let mut beta = self.theta.beta().to_vec();
        for &lab in labs {
            if lab == 0 || lab >= self.design.n_labs() {
                return Err(Error::InvalidInput(format!(
                    "cannot perturb laboratory {lab} (0 is the reference)"
                )));
            }
            alpha[lab - 1] += d;
            beta[lab - 1] += d;
        }
        let theta = ParameterVector::new(self.theta.mu_x().to_vec(), alpha, beta)?;
        TrueParameters::new(theta, self.design.clone())
    }

    /// Whether the tested laboratories satisfy the null hypothesis.
    fn is_null_for(&self, hypothesis: &SizeHypothesis) -> bool {
        let null_lab = |lab: usize| {
            self.theta.alpha()[lab - 1] == 0.0 && self.theta.beta()[lab - 1] == 1.0
        };
        match hypothesis {
            SizeHypothesis::Global => (1..self.design.n_labs()).all(null_lab),
            SizeHypothesis::Lab(lab) => null_lab(*lab),
        }
    }
}

/// Draw one data set from the model.
///
/// Each latent level value is drawn once and shared by every laboratory and
/// replicate (the item under test is a single physical object); measurement
/// errors are independent. The draw order is fixed (levels first, then errors
/// in laboratory/level/replicate order), so a given seed always produces a
/// byte-identical data set.
pub fn simulate_dataset(truth: &TrueParameters, seed: u64) -> Measurements {
    let design = &truth.design;
    let theta = &truth.theta;
    let p = design.n_labs();
    let m = design.n_levels();
    let mut rng = stream(seed);

    let x: Vec<f64> = (0..m)
        .map(|j| theta.mu_x()[j] + design.sigma2_x()[j].sqrt() * standard_normal(&mut rng))
        .collect();

    let mut y = Vec::with_capacity(p);
    for i in 0..p {
        let n_i = design.replicas()[i];
        let alpha_i = theta.alpha_of(i);
        let beta_i = theta.beta_of(i);
        let mut lab = Vec::with_capacity(m);
        for (j, &x_j) in x.iter().enumerate() {
            let sd = design.sigma2(i, j).sqrt();
            let mean = alpha_i + beta_i * x_j;
            lab.push(
                (0..n_i)
                    .map(|_| mean + sd * standard_normal(&mut rng))
                    .collect::<Vec<f64>>(),
            );
        }
        y.push(lab);
    }
    Measurements::new(y).expect("simulated data matches its own design")
}

/// Which test a size study calibrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "test", content = "lab")]
pub enum SizeHypothesis {
    /// Global equivalence of all laboratories.
    Global,
    /// Per-laboratory test of one non-reference laboratory (index >= 1).
    Lab(usize),
}

/// Monte Carlo study configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Replications per cell.
    pub replications: usize,
    /// Nominal significance levels for size studies.
    pub levels: Vec<f64>,
    /// Replica counts to sweep.
    pub replica_counts: Vec<usize>,
    /// Measurement-error regime of the benchmark truth.
    pub regime: VarianceRegime,
    /// Deviation grid for power studies; each `d` is added to both `alpha`
    /// and `beta` of the perturbed laboratories.
    pub deviations: Vec<f64>,
    /// Non-reference laboratories perturbed in power studies (0 = reference).
    pub perturbed_labs: Vec<usize>,
    /// Master seed; all replication streams derive from it.
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            replications: 2000,
            levels: vec![0.01, 0.05, 0.10],
            replica_counts: vec![3, 7, 15, 30],
            regime: VarianceRegime::A,
            deviations: vec![0.0, 0.002, 0.005, 0.01],
            perturbed_labs: vec![1, 3],
            seed: 1,
        }
    }
}

impl StudyConfig {
    fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::InvalidInput("replications must be >= 1".into()));
        }
        for &l in &self.levels {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "nominal level {l} outside (0, 1)"
                )));
            }
        }
        if self.replica_counts.is_empty() {
            return Err(Error::InvalidInput("no replica counts to sweep".into()));
        }
        if self.replica_counts.iter().any(|&n| n < 1) {
            return Err(Error::InvalidInput("replica counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One (replica count, nominal level) cell of a size study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeCell {
    pub replica_count: usize,
    pub level: f64,
    /// Replications whose p-value fell below the level.
    pub rejections: usize,
    /// Replications that produced a usable fit.
    pub n_effective: usize,
    pub n_failed: usize,
    /// Empirical size `rejections / n_effective`.
    pub rate: f64,
    /// Binomial standard error `sqrt(rate (1 - rate) / n_effective)`.
    pub se: f64,
}

/// Result of an empirical size study, including its full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub hypothesis: SizeHypothesis,
    pub config: StudyConfig,
    pub cells: Vec<SizeCell>,
}

/// One point of a power study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub replica_count: usize,
    pub deviation: f64,
    pub rejections: usize,
    pub n_effective: usize,
    pub n_failed: usize,
    pub rate: f64,
    pub se: f64,
}

/// Result of a power study over the deviation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerStudyResult {
    pub config: StudyConfig,
    /// Rejection threshold: the 0.95 chi-square quantile at the global df.
    pub threshold: f64,
    pub df: usize,
    pub points: Vec<PowerPoint>,
}

fn binomial_cell(rejections: usize, n_effective: usize) -> (f64, f64) {
    if n_effective == 0 {
        return (f64::NAN, f64::NAN);
    }
    let rate = rejections as f64 / n_effective as f64;
    (rate, (rate * (1.0 - rate) / n_effective as f64).sqrt())
}

/// Simulate, fit, and test one replication; `None` marks a failed fit.
fn replicate_pvalue(
    truth: &TrueParameters,
    hypothesis: &SizeHypothesis,
    seed: u64,
) -> Option<f64> {
    let data = simulate_dataset(truth, seed);
    let fit = fit_em(&data, &truth.design, &EmSettings::default()).ok()?;
    let test = match hypothesis {
        SizeHypothesis::Global => wald_global(&fit).ok()?,
        SizeHypothesis::Lab(lab) => wald_individual(&fit, *lab).ok()?,
    };
    Some(test.p_value)
}

/// Empirical size of the Wald test under the null benchmark truth.
///
/// For each replica count, `replications` data sets are generated under the
/// null, refit, and tested; each nominal level yields one cell with the
/// rejection fraction. Replication failures are counted, never fatal.
pub fn empirical_size_study(
    config: &StudyConfig,
    hypothesis: SizeHypothesis,
) -> Result<StudyResult> {
    config.validate()?;
    if let SizeHypothesis::Lab(lab) = hypothesis {
        if lab == 0 || lab >= 5 {
            return Err(Error::InvalidInput(format!(
                "individual-test laboratory must be in 1..5, got {lab}"
            )));
        }
    }

    let mut cells = Vec::new();
    for (ci, &n_rep) in config.replica_counts.iter().enumerate() {
        let truth = TrueParameters::benchmark(config.regime, n_rep);
        debug_assert!(truth.is_null_for(&hypothesis));
        let cell_seed = derive_seed(config.seed, ci as u64);
        let pvals: Vec<Option<f64>> = (0..config.replications)
            .into_par_iter()
            .map(|rep| replicate_pvalue(&truth, &hypothesis, derive_seed(cell_seed, rep as u64)))
            .collect();
        let n_failed = pvals.iter().filter(|p| p.is_none()).count();
        let n_effective = pvals.len() - n_failed;
        for &level in &config.levels {
            let rejections = pvals
                .iter()
                .flatten()
                .filter(|&&p| p < level)
                .count();
            let (rate, se) = binomial_cell(rejections, n_effective);
            cells.push(SizeCell {
                replica_count: n_rep,
                level,
                rejections,
                n_effective,
                n_failed,
                rate,
                se,
            });
        }
    }
    Ok(StudyResult {
        hypothesis,
        config: config.clone(),
        cells,
    })
}

/// Power of the global Wald test along the deviation grid.
///
/// Each deviation `d` shifts both biases of the perturbed laboratories by `d`;
/// rejection compares the statistic against the 0.95 chi-square quantile at
/// the global degrees of freedom.
pub fn power_study(config: &StudyConfig) -> Result<PowerStudyResult> {
    config.validate()?;
    if config.deviations.is_empty() {
        return Err(Error::InvalidInput("deviation grid is empty".into()));
    }
    let df = 2 * (5 - 1);
    let threshold = chi2_quantile(0.95, df)?;

    let mut points = Vec::new();
    let mut cell_index = 0u64;
    for &n_rep in &config.replica_counts {
        let base = TrueParameters::benchmark(config.regime, n_rep);
        for &d in &config.deviations {
            let truth = base.perturbed(&config.perturbed_labs, d)?;
            let cell_seed = derive_seed(config.seed, cell_index);
            cell_index += 1;
            let stats: Vec<Option<f64>> = (0..config.replications)
                .into_par_iter()
                .map(|rep| {
                    let seed = derive_seed(cell_seed, rep as u64);
                    let data = simulate_dataset(&truth, seed);
                    let fit = fit_em(&data, &truth.design, &EmSettings::default()).ok()?;
                    wald_global(&fit).ok().map(|t| t.statistic)
                })
                .collect();
            let n_failed = stats.iter().filter(|s| s.is_none()).count();
            let n_effective = stats.len() - n_failed;
            let rejections = stats.iter().flatten().filter(|&&q| q > threshold).count();
            let (rate, se) = binomial_cell(rejections, n_effective);
            points.push(PowerPoint {
                replica_count: n_rep,
                deviation: d,
                rejections,
                n_effective,
                n_failed,
                rate,
                se,
            });
        }
    }
    Ok(PowerStudyResult {
        config: config.clone(),
        threshold,
        df,
        points,
    })
}

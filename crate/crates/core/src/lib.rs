//! Laboratory equivalence analysis for multi-level proficiency testing.
//!
//! A group of `p` laboratories measures the same item at `m` levels; laboratory 1
//! (index 0 here) is the reference. Each participant laboratory distorts the latent
//! level value `x_j` through an affine bias `alpha_i + beta_i * x_j`, and every
//! measurement carries a known error variance (combined type A + type B uncertainty).
//! This crate fits that ultrastructural measurement-error model by maximum
//! likelihood (a closed-form EM iteration), evaluates equivalence against the
//! reference with Wald-type statistics under familywise error control, produces
//! joint confidence-region geometry for the per-laboratory biases, and runs
//! Monte Carlo size/power studies of the tests.
//!
//! Module map:
//! - [`model`]: study design, measurement storage, parameter vector, likelihood kernels.
//! - [`em`]: EM fitting of the bias and level-mean parameters.
//! - [`info`]: score vector, observed information matrix, asymptotic limit matrix.
//! - [`inference`]: chi-square special functions, Wald tests, p-value adjustment,
//!   confidence ellipses.
//! - [`sim`]: data generation and empirical size/power studies.
//! - [`io`]: CSV/JSON ingestion and report emission used by the CLI.

pub mod em;
pub mod error;
pub mod info;
pub mod inference;
pub mod io;
pub mod model;
pub mod sim;
pub mod special;

pub use em::{fit_em, EmSettings, FitResult};
pub use error::{Error, Result};
pub use inference::{
    adjust_pvalues, chi2_cdf, chi2_quantile, confidence_ellipse, wald_composite, wald_global,
    wald_individual, wald_report, AdjustMethod, EllipseSpec, WaldReport, WaldTest,
};
pub use model::{
    compute_kernels, log_likelihood, LikelihoodKernels, Measurements, ParameterVector, StudyDesign,
};
pub use sim::{
    empirical_size_study, power_study, simulate_dataset, PowerStudyResult, SizeHypothesis,
    StudyConfig, StudyResult, TrueParameters, VarianceRegime,
};

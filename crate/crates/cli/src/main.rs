//! `labeq` command line: fit the measurement-error model, test laboratory
//! equivalence, emit confidence-region geometry, and run the Monte Carlo
//! size/power studies.
//!
//! Exit codes: 0 success, 2 input error (bad files, bad flags), 3 numerical
//! failure (singular information or a fit that did not converge).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use labeq::em::{fit_em, EmSettings, FitResult};
use labeq::inference::{confidence_ellipse, format_p6, wald_report, AdjustMethod, EllipseSpec,
                       WaldReport};
use labeq::io::{self, AnalysisConfig, NameMaps};
use labeq::model::StudyDesign;
use labeq::sim::{empirical_size_study, power_study, SizeHypothesis, StudyConfig,
                 VarianceRegime};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "labeq", version, about = "Laboratory equivalence analysis for proficiency testing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model by maximum likelihood and write fit.json
    Fit(AnalysisArgs),
    /// Fit, run the global and per-laboratory Wald tests, write tests.csv
    Test(AnalysisArgs),
    /// Fit and write joint confidence-region polylines per laboratory
    Ellipse(AnalysisArgs),
    /// Fit, test, and emit confidence regions in one pass
    Report(AnalysisArgs),
    /// Monte Carlo studies of the tests
    #[command(subcommand)]
    Simulate(SimulateCommand),
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// Empirical size of the global or per-laboratory test under the null
    Size(SimulateArgs),
    /// Power of the global test along a deviation grid
    Power(SimulateArgs),
}

#[derive(Args, Clone)]
struct AnalysisArgs {
    /// Measurements CSV with header lab,level,replicate,value
    #[arg(long)]
    data: Option<PathBuf>,
    /// Design JSON with keys sigma2_x, sigma2, replicas
    #[arg(long)]
    design: Option<PathBuf>,
    /// JSON analysis config; explicit flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Laboratory name treated as the reference (default: first in the file)
    #[arg(long)]
    reference_lab: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Familywise error level (default 0.05 for tests, 0.01 for ellipses)
    #[arg(long)]
    fwer: Option<f64>,
    /// Adjustment method for the test verdicts
    #[arg(long, value_parser = parse_method)]
    method: Option<AdjustMethod>,
    /// EM iteration cap
    #[arg(long)]
    max_iter: Option<usize>,
    /// EM relative log-likelihood tolerance
    #[arg(long)]
    tol_loglik: Option<f64>,
    /// EM parameter-change tolerance
    #[arg(long)]
    tol_param: Option<f64>,
}

#[derive(Args, Clone)]
struct SimulateArgs {
    /// Measurement-error regime of the benchmark truth: a, b, or c
    #[arg(long, default_value = "a")]
    regime: String,
    /// Replications per cell (default 2000; desk scale)
    #[arg(long)]
    replications: Option<usize>,
    /// Run at the published scale (10000 replications)
    #[arg(long)]
    full_scale: bool,
    /// Master seed; all replication streams derive from it
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Replica counts to sweep, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = vec![3usize, 7, 15, 30])]
    replicas: Vec<usize>,
    /// Nominal levels for size studies, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.10])]
    levels: Vec<f64>,
    /// Deviation grid for power studies, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.002, 0.005, 0.01])]
    deviations: Vec<f64>,
    /// Laboratory for the individual-test size study (1-based, >= 2)
    #[arg(long)]
    lab: Option<usize>,
    /// Output directory
    #[arg(long, default_value = "labeq-out")]
    out: PathBuf,
}

fn parse_method(s: &str) -> Result<AdjustMethod, String> {
    s.parse().map_err(|e: labeq::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => run_fit(args),
        Command::Test(args) => run_test(args),
        Command::Ellipse(args) => run_ellipse(args),
        Command::Report(args) => run_report(args),
        Command::Simulate(SimulateCommand::Size(args)) => run_size(args),
        Command::Simulate(SimulateCommand::Power(args)) => run_power(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::from(EXIT_NUMERICAL)
            }
        }
    }
}

/// Inputs resolved from flags and the optional config file.
struct Analysis {
    design: StudyDesign,
    maps: NameMaps,
    fit: FitResult,
    fwer: Option<f64>,
    method: AdjustMethod,
    out: PathBuf,
}

fn load_analysis(args: &AnalysisArgs) -> labeq::Result<Analysis> {
    let config = match &args.config {
        Some(path) => io::load_config(path)?,
        None => AnalysisConfig::default(),
    };
    let data_path = args
        .data
        .clone()
        .or(config.data.clone())
        .ok_or_else(|| labeq::Error::InvalidInput("--data (or config.data) is required".into()))?;
    let design_path = args
        .design
        .clone()
        .or(config.design.clone())
        .ok_or_else(|| {
            labeq::Error::InvalidInput("--design (or config.design) is required".into())
        })?;
    let reference = args
        .reference_lab
        .clone()
        .or(config.reference_lab.clone());

    let (data, maps) = io::parse_measurements(&data_path, reference.as_deref())?;
    let design = io::parse_design(&design_path)?;
    data.check_design(&design)?;

    let settings = EmSettings {
        tol_loglik: args.tol_loglik.or(config.tol_loglik).unwrap_or(1e-10),
        tol_param: args.tol_param.or(config.tol_param).unwrap_or(1e-8),
        max_iter: args.max_iter.or(config.max_iter).unwrap_or(10_000),
        init: None,
    };
    let fit = fit_em(&data, &design, &settings)?;
    if fit.single_level {
        eprintln!(
            "warning: single-level design; multiplicative bias is confounded with additive bias"
        );
    }

    Ok(Analysis {
        design,
        maps,
        fit,
        fwer: args.fwer.or(config.fwer),
        method: args.method.or(config.method).unwrap_or(AdjustMethod::Hochberg),
        out: args
            .out
            .clone()
            .or(config.out.clone())
            .unwrap_or_else(|| PathBuf::from("labeq-out")),
    })
}

fn print_fit(analysis: &Analysis) {
    let fit = &analysis.fit;
    println!(
        "fit: {} laboratories, {} levels, log-likelihood {:.6}, {} iterations{}",
        analysis.design.n_labs(),
        analysis.design.n_levels(),
        fit.loglik(),
        fit.iterations,
        if fit.converged { "" } else { " (NOT converged)" }
    );
    println!("{:<16}{:>12}{:>12}", "laboratory", "alpha", "beta");
    for lab in 1..analysis.design.n_labs() {
        println!(
            "{:<16}{:>12.6}{:>12.6}",
            analysis.maps.labs[lab],
            fit.theta_hat.alpha()[lab - 1],
            fit.theta_hat.beta()[lab - 1]
        );
    }
}

fn print_tests(analysis: &Analysis, wald: &WaldReport) {
    println!(
        "global test: Q_w = {:.6}, df = {}, p = {} -> {}",
        wald.q_global,
        wald.df_global,
        format_p6(wald.p_global),
        if wald.p_global <= wald.alpha { "reject" } else { "retain" }
    );
    println!(
        "{:<16}{:>14}{:>11}{:>11}{:>11}{:>11}{:>9}",
        "laboratory", "q_w", "p", "holm", "hochberg", "hommel", "verdict"
    );
    for row in &wald.labs {
        println!(
            "{:<16}{:>14.6}{:>11}{:>11}{:>11}{:>11}{:>9}",
            analysis.maps.labs[row.lab],
            row.q_w,
            format_p6(row.p_raw),
            format_p6(row.p_holm),
            format_p6(row.p_hochberg),
            format_p6(row.p_hommel),
            if row.reject { "reject" } else { "retain" }
        );
    }
    println!(
        "familywise level {} with {} adjustment",
        wald.alpha,
        wald.method.name()
    );
}

fn convergence_exit(fit: &FitResult) -> ExitCode {
    if fit.converged {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: EM did not converge within the iteration cap");
        ExitCode::from(EXIT_NUMERICAL)
    }
}

fn run_fit(args: AnalysisArgs) -> labeq::Result<ExitCode> {
    let analysis = load_analysis(&args)?;
    std::fs::create_dir_all(&analysis.out).map_err(|e| labeq::Error::Io {
        path: analysis.out.display().to_string(),
        source: e,
    })?;
    let record = io::FitRecord::from_fit(&analysis.fit, &analysis.maps);
    let path = analysis.out.join("fit.json");
    io::write_fit_record(&path, &record)?;
    print_fit(&analysis);
    println!("wrote {}", path.display());
    Ok(convergence_exit(&analysis.fit))
}

fn run_test(args: AnalysisArgs) -> labeq::Result<ExitCode> {
    let analysis = load_analysis(&args)?;
    let alpha = analysis.fwer.unwrap_or(0.05);
    let wald = wald_report(&analysis.fit, analysis.method, alpha)?;
    let written = io::emit_report(&analysis.fit, &wald, &[], &analysis.maps, &analysis.out)?;
    print_tests(&analysis, &wald);
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(convergence_exit(&analysis.fit))
}

fn build_ellipses(analysis: &Analysis, fwer: f64) -> labeq::Result<Vec<EllipseSpec>> {
    let p = analysis.design.n_labs();
    (1..p)
        .map(|lab| confidence_ellipse(&analysis.fit, lab, 1.0 - fwer, p - 1))
        .collect()
}

fn run_ellipse(args: AnalysisArgs) -> labeq::Result<ExitCode> {
    let analysis = load_analysis(&args)?;
    let fwer = analysis.fwer.unwrap_or(0.01);
    let ellipses = build_ellipses(&analysis, fwer)?;
    std::fs::create_dir_all(&analysis.out).map_err(|e| labeq::Error::Io {
        path: analysis.out.display().to_string(),
        source: e,
    })?;
    for ellipse in &ellipses {
        let verdict = if ellipse.contains([0.0, 1.0]) { "contains" } else { "excludes" };
        println!(
            "laboratory {}: {:.4}% joint region {} the unbiased point",
            analysis.maps.labs[ellipse.lab],
            100.0 * ellipse.level,
            verdict
        );
    }
    let written = io::emit_ellipses(&ellipses, &analysis.maps, &analysis.out)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(convergence_exit(&analysis.fit))
}

fn run_report(args: AnalysisArgs) -> labeq::Result<ExitCode> {
    let analysis = load_analysis(&args)?;
    let alpha = analysis.fwer.unwrap_or(0.05);
    let wald = wald_report(&analysis.fit, analysis.method, alpha)?;
    // regions follow the application convention: 99% joint confidence
    let ellipses = build_ellipses(&analysis, 0.01)?;
    let written = io::emit_report(&analysis.fit, &wald, &ellipses, &analysis.maps, &analysis.out)?;
    print_fit(&analysis);
    print_tests(&analysis, &wald);
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(convergence_exit(&analysis.fit))
}

fn study_config(args: &SimulateArgs) -> labeq::Result<StudyConfig> {
    let regime: VarianceRegime = args.regime.parse()?;
    let replications = if args.full_scale {
        args.replications.unwrap_or(10_000)
    } else {
        args.replications.unwrap_or(2000)
    };
    Ok(StudyConfig {
        replications,
        levels: args.levels.clone(),
        replica_counts: args.replicas.clone(),
        regime,
        deviations: args.deviations.clone(),
        seed: args.seed,
        ..StudyConfig::default()
    })
}

fn run_size(args: SimulateArgs) -> labeq::Result<ExitCode> {
    let config = study_config(&args)?;
    let hypothesis = match args.lab {
        // user-facing laboratory numbers are 1-based with the reference first
        Some(lab) if lab >= 2 => SizeHypothesis::Lab(lab - 1),
        Some(lab) => {
            return Err(labeq::Error::InvalidInput(format!(
                "--lab must be >= 2 (laboratory 1 is the reference), got {lab}"
            )))
        }
        None => SizeHypothesis::Global,
    };
    let result = empirical_size_study(&config, hypothesis)?;
    std::fs::create_dir_all(&args.out).map_err(|e| labeq::Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    let csv = args.out.join("size.csv");
    let json = args.out.join("size.json");
    io::write_size_csv(&csv, &result)?;
    io::write_size_json(&json, &result)?;
    println!("empirical size, regime {}, N = {}:", config.regime.label(), config.replications);
    println!("{:>10}{:>8}{:>10}{:>10}{:>8}", "replicas", "level", "rate", "se", "fails");
    for cell in &result.cells {
        println!(
            "{:>10}{:>8}{:>10.4}{:>10.4}{:>8}",
            cell.replica_count, cell.level, cell.rate, cell.se, cell.n_failed
        );
    }
    println!("wrote {}", csv.display());
    println!("wrote {}", json.display());
    Ok(ExitCode::SUCCESS)
}

fn run_power(args: SimulateArgs) -> labeq::Result<ExitCode> {
    let config = study_config(&args)?;
    let result = power_study(&config)?;
    std::fs::create_dir_all(&args.out).map_err(|e| labeq::Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    let csv = args.out.join("power.csv");
    let json = args.out.join("power.json");
    io::write_power_csv(&csv, &result)?;
    io::write_power_json(&json, &result)?;
    println!(
        "power of the global test, regime {}, threshold {:.5} (chi-square {} df), N = {}:",
        config.regime.label(),
        result.threshold,
        result.df,
        config.replications
    );
    println!("{:>10}{:>12}{:>10}{:>10}{:>8}", "replicas", "deviation", "power", "se", "fails");
    for point in &result.points {
        println!(
            "{:>10}{:>12}{:>10.4}{:>10.4}{:>8}",
            point.replica_count, point.deviation, point.rate, point.se, point.n_failed
        );
    }
    println!("wrote {}", csv.display());
    println!("wrote {}", json.display());
    Ok(ExitCode::SUCCESS)
}

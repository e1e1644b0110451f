//! File formats and report emission.
//!
//! Measurements travel as CSV with header `lab,level,replicate,value`; designs
//! as JSON with keys `sigma2_x`, `sigma2`, `replicas`. All emitted numbers use
//! the shortest round-trip decimal form, so every file re-parses losslessly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::inference::{AdjustMethod, EllipseSpec, WaldReport};
use crate::model::{Measurements, StudyDesign};
use crate::sim::{PowerStudyResult, StudyResult};

/// Version stamped into every emitted file.
pub const SCHEMA_VERSION: u32 = 1;

/// String identifiers for laboratories and levels, in index order
/// (laboratory 0 is the reference).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameMaps {
    pub labs: Vec<String>,
    pub levels: Vec<String>,
}

impl NameMaps {
    /// Numeric placeholder names `lab1..labp` / `level1..levelm`
    /// (1-based, reference first) for data without external identifiers.
    pub fn numeric(n_labs: usize, n_levels: usize) -> NameMaps {
        NameMaps {
            labs: (1..=n_labs).map(|i| format!("lab{i}")).collect(),
            levels: (1..=n_levels).map(|j| format!("level{j}")).collect(),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parse a measurements CSV.
///
/// Labs and levels may be arbitrary strings; they are mapped to indices in
/// order of first appearance, except that the reference laboratory (by name
/// if given, otherwise the first laboratory in the file) is forced to index 0.
/// Duplicate `(lab, level, replicate)` keys and ragged cells are rejected with
/// the offending line number.
pub fn parse_measurements(
    path: &Path,
    reference_lab: Option<&str>,
) -> Result<(Measurements, NameMaps)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let path_str = path.display().to_string();

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path_str.clone(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["lab", "level", "replicate", "value"];
    let actual: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if actual != expected {
        return Err(Error::Parse {
            path: path_str,
            line: 1,
            message: format!(
                "expected header 'lab,level,replicate,value', got '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    struct Row {
        lab: String,
        level: String,
        value: f64,
    }
    let mut rows = Vec::new();
    let mut seen: HashMap<(String, String, String), u64> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path_str.clone(),
            line: e
                .position()
                .map(|p| p.line())
                .unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 {
            return Err(Error::Parse {
                path: path_str.clone(),
                line,
                message: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let lab = record[0].to_string();
        let level = record[1].to_string();
        let replicate = record[2].to_string();
        let value: f64 = record[3].parse().map_err(|_| Error::Parse {
            path: path_str.clone(),
            line,
            message: format!("invalid value '{}'", &record[3]),
        })?;
        if lab.is_empty() || level.is_empty() || replicate.is_empty() {
            return Err(Error::Parse {
                path: path_str.clone(),
                line,
                message: "empty lab, level, or replicate field".into(),
            });
        }
        let key = (lab.clone(), level.clone(), replicate);
        if let Some(first) = seen.get(&key) {
            return Err(Error::Parse {
                path: path_str.clone(),
                line,
                message: format!(
                    "duplicate key (lab={}, level={}, replicate={}) first seen on line {first}",
                    key.0, key.1, key.2
                ),
            });
        }
        seen.insert(key, line);
        rows.push(Row { lab, level, value });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path_str,
            line: 1,
            message: "no data rows".into(),
        });
    }

    // lab order: reference first, then first appearance
    let mut labs: Vec<String> = Vec::new();
    for row in &rows {
        if !labs.contains(&row.lab) {
            labs.push(row.lab.clone());
        }
    }
    if let Some(reference) = reference_lab {
        let pos = labs.iter().position(|l| l == reference).ok_or_else(|| {
            Error::InvalidInput(format!(
                "reference laboratory '{reference}' not present in {path_str}"
            ))
        })?;
        labs.remove(pos);
        labs.insert(0, reference.to_string());
    }
    let mut levels: Vec<String> = Vec::new();
    for row in &rows {
        if !levels.contains(&row.level) {
            levels.push(row.level.clone());
        }
    }

    let lab_index: HashMap<&str, usize> =
        labs.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let level_index: HashMap<&str, usize> =
        levels.iter().enumerate().map(|(j, l)| (l.as_str(), j)).collect();

    let mut y = vec![vec![Vec::new(); levels.len()]; labs.len()];
    for row in &rows {
        y[lab_index[row.lab.as_str()]][level_index[row.level.as_str()]].push(row.value);
    }
    for (i, lab) in y.iter().enumerate() {
        for (j, cell) in lab.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "laboratory '{}' has no replicates at level '{}'",
                    labs[i], levels[j]
                )));
            }
        }
    }

    let data = Measurements::new(y).map_err(|e| match e {
        Error::DimensionMismatch { location, expected, actual } => Error::InvalidInput(format!(
            "ragged data: {location} (expected {expected}, got {actual})"
        )),
        other => other,
    })?;
    Ok((data, NameMaps { labs, levels }))
}

/// Write measurements in the same CSV dialect that [`parse_measurements`] reads.
pub fn write_measurements(path: &Path, data: &Measurements, maps: &NameMaps) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "lab,level,replicate,value")?;
        for i in 0..data.n_labs() {
            for j in 0..data.n_levels() {
                for (k, v) in data.cell(i, j).iter().enumerate() {
                    writeln!(w, "{},{},{},{}", maps.labs[i], maps.levels[j], k + 1, v)?;
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct DesignFile {
    #[serde(default)]
    schema_version: Option<u32>,
    sigma2_x: Vec<f64>,
    sigma2: Vec<Vec<f64>>,
    replicas: Vec<usize>,
}

/// Parse a design JSON file with keys `sigma2_x` (length m), `sigma2`
/// (p rows of length m), and `replicas` (length p).
pub fn parse_design(path: &Path) -> Result<StudyDesign> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let parsed: DesignFile =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
    StudyDesign::new(parsed.replicas, parsed.sigma2_x, parsed.sigma2)
}

/// Write a design JSON file.
pub fn write_design(path: &Path, design: &StudyDesign) -> Result<()> {
    let record = DesignFile {
        schema_version: Some(SCHEMA_VERSION),
        sigma2_x: design.sigma2_x().to_vec(),
        sigma2: design.sigma2_rows().to_vec(),
        replicas: design.replicas().to_vec(),
    };
    write_json(path, &record)
}

/// Serialized form of a fit, the content of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub schema_version: u32,
    pub labs: Vec<String>,
    pub levels: Vec<String>,
    pub mu_x: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub score_sup: f64,
    pub single_level: bool,
}

impl FitRecord {
    pub fn from_fit(fit: &FitResult, maps: &NameMaps) -> FitRecord {
        FitRecord {
            schema_version: SCHEMA_VERSION,
            labs: maps.labs.clone(),
            levels: maps.levels.clone(),
            mu_x: fit.theta_hat.mu_x().to_vec(),
            alpha: fit.theta_hat.alpha().to_vec(),
            beta: fit.theta_hat.beta().to_vec(),
            converged: fit.converged,
            iterations: fit.iterations,
            loglik: fit.loglik(),
            loglik_trace: fit.loglik_trace.clone(),
            score_sup: fit.score_sup,
            single_level: fit.single_level,
        }
    }
}

/// Write a `fit.json`.
pub fn write_fit_record(path: &Path, record: &FitRecord) -> Result<()> {
    write_json(path, record)
}

/// Read back a `fit.json`.
pub fn read_fit_record(path: &Path) -> Result<FitRecord> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write `fit.json`, `tests.csv`, and one `ellipse_<lab>.csv` per region.
///
/// Returns the written paths. The adjusted-p columns of `tests.csv` are
/// ordered Holm, Hochberg, Hommel, then Bonferroni.
pub fn emit_report(
    fit: &FitResult,
    wald: &WaldReport,
    ellipses: &[EllipseSpec],
    maps: &NameMaps,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();

    let fit_path = dir.join("fit.json");
    write_json(&fit_path, &FitRecord::from_fit(fit, maps))?;
    written.push(fit_path);

    let tests_path = dir.join("tests.csv");
    let file = File::create(&tests_path).map_err(|e| io_err(&tests_path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(
            w,
            "schema_version,lab,q_w,df,p_raw,p_holm,p_hochberg,p_hommel,p_bonferroni,method,alpha,verdict"
        )?;
        for row in &wald.labs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                SCHEMA_VERSION,
                maps.labs[row.lab],
                row.q_w,
                row.df,
                row.p_raw,
                row.p_holm,
                row.p_hochberg,
                row.p_hommel,
                row.p_bonferroni,
                wald.method.name(),
                wald.alpha,
                if row.reject { "reject" } else { "retain" }
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(&tests_path, e))?;
    written.push(tests_path);

    written.extend(emit_ellipses(ellipses, maps, dir)?);
    Ok(written)
}

/// Write one `ellipse_<lab>.csv` polyline file per region.
pub fn emit_ellipses(
    ellipses: &[EllipseSpec],
    maps: &NameMaps,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    for ellipse in ellipses {
        let name = sanitize(&maps.labs[ellipse.lab]);
        let path = dir.join(format!("ellipse_{name}.csv"));
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            writeln!(
                w,
                "schema_version,lab,level,radius2,center_alpha,center_beta,point,alpha,beta"
            )?;
            for (t, pt) in ellipse.boundary.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    SCHEMA_VERSION,
                    maps.labs[ellipse.lab],
                    ellipse.level,
                    ellipse.radius2,
                    ellipse.center[0],
                    ellipse.center[1],
                    t,
                    pt[0],
                    pt[1]
                )?;
            }
            w.flush()
        })();
        res.map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Write the per-cell CSV of a size study.
pub fn write_size_csv(path: &Path, result: &StudyResult) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "schema_version,replica_count,level,regime,rate,se,n_effective")?;
        for cell in &result.cells {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                SCHEMA_VERSION,
                cell.replica_count,
                cell.level,
                result.config.regime.label(),
                cell.rate,
                cell.se,
                cell.n_effective
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

/// Write the per-point CSV of a power study.
pub fn write_power_csv(path: &Path, result: &PowerStudyResult) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(
            w,
            "schema_version,replica_count,deviation,regime,rate,se,n_effective"
        )?;
        for point in &result.points {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                SCHEMA_VERSION,
                point.replica_count,
                point.deviation,
                result.config.regime.label(),
                point.rate,
                point.se,
                point.n_effective
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

/// Full-provenance JSON companion of a study CSV.
#[derive(Debug, Serialize)]
struct StudyEnvelope<'a, T: Serialize> {
    schema_version: u32,
    kind: &'static str,
    result: &'a T,
}

pub fn write_size_json(path: &Path, result: &StudyResult) -> Result<()> {
    write_json(
        path,
        &StudyEnvelope {
            schema_version: SCHEMA_VERSION,
            kind: "size",
            result,
        },
    )
}

pub fn write_power_json(path: &Path, result: &PowerStudyResult) -> Result<()> {
    write_json(
        path,
        &StudyEnvelope {
            schema_version: SCHEMA_VERSION,
            kind: "power",
            result,
        },
    )
}

/// Analysis configuration file (`--config`); command-line flags override any
/// field set here.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub data: Option<PathBuf>,
    pub design: Option<PathBuf>,
    pub reference_lab: Option<String>,
    pub fwer: Option<f64>,
    pub method: Option<AdjustMethod>,
    pub out: Option<PathBuf>,
    pub tol_loglik: Option<f64>,
    pub tol_param: Option<f64>,
    pub max_iter: Option<usize>,
}

pub fn load_config(path: &Path) -> Result<AnalysisConfig> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

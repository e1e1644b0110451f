//! Regenerates `data/demo_measurements.csv`.
//!
//! The engine-power study's raw measurements are confidential, so the repo
//! ships a synthetic stand-in: data drawn from the bundled variance tables
//! (`data/appendixA.json`) with laboratory biases set to the published
//! estimates and level means chosen as a plausible power sweep. The seed is
//! fixed, so the output is byte-identical on every run.

use std::path::Path;

use labeq::io::{parse_design, write_measurements, NameMaps};
use labeq::model::ParameterVector;
use labeq::sim::{simulate_dataset, TrueParameters};

fn main() {
    let root = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data"));
    let design = parse_design(&root.join("appendixA.json")).expect("bundled design parses");

    let mu_x: Vec<f64> = (0..9).map(|j| 40.0 + 10.0 * j as f64).collect();
    let alpha = vec![0.0700, 0.1000, 0.0658, 0.2183, 0.1288, -0.0315, 0.0063];
    let beta = vec![0.9661, 0.9856, 0.9957, 0.9871, 0.9983, 0.9745, 0.9913];
    let theta = ParameterVector::new(mu_x, alpha, beta).expect("valid parameters");
    let truth = TrueParameters::new(theta, design).expect("parameters match design");

    let data = simulate_dataset(&truth, 20_240_601);
    let maps = NameMaps {
        labs: (1..=8).map(|i| format!("lab{i}")).collect(),
        levels: (0..9).map(|j| format!("{}", 1000 + 500 * j)).collect(),
    };
    let out = root.join("demo_measurements.csv");
    write_measurements(&out, &data, &maps).expect("write demo data");
    println!("wrote {}", out.display());
}

//! Likelihood kernels and log-likelihood against the dense-covariance oracle.

mod common;

use common::{dense_log_likelihood, random_instance, rng, uniform_usize};
use labeq::model::{compute_kernels, log_likelihood, Measurements, ParameterVector, StudyDesign};
use rand_chacha::rand_core::RngCore;

#[test]
fn log_likelihood_matches_dense_oracle() {
    for seed in 0..40 {
        let inst = random_instance(1000 + seed, 4, 4, 6);
        let fast = log_likelihood(&inst.theta, &inst.data, &inst.design).unwrap();
        let dense = dense_log_likelihood(&inst.theta, &inst.data, &inst.design);
        assert!(
            (fast - dense).abs() <= 1e-10 * (1.0 + dense.abs()),
            "seed {seed}: fast {fast} vs dense {dense}"
        );
    }
}

#[test]
fn log_likelihood_matches_dense_oracle_at_n30() {
    // a larger single instance near the oracle's stated n <= 30 range
    let design = StudyDesign::new(
        vec![10, 12, 8],
        vec![0.2, 0.3],
        vec![vec![0.1, 0.2], vec![0.15, 0.25], vec![0.05, 0.3]],
    )
    .unwrap();
    let theta = ParameterVector::new(vec![5.0, 9.0], vec![0.2, -0.1], vec![1.05, 0.95]).unwrap();
    let truth = labeq::sim::TrueParameters::new(theta.clone(), design.clone()).unwrap();
    let data = labeq::sim::simulate_dataset(&truth, 77);
    let fast = log_likelihood(&theta, &data, &design).unwrap();
    let dense = dense_log_likelihood(&theta, &data, &design);
    assert!((fast - dense).abs() <= 1e-10 * (1.0 + dense.abs()));
}

#[test]
fn appendix_variance_table_a_factor() {
    // j = 1, all beta = 1, all n_i = 1: a_1 = 1 + sigma2_x_1 * sum_i 1/sigma2_i1,
    // summed directly from the bundled variance tables.
    let path = std::path::Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../data/appendixA.json"
    ));
    let shipped = labeq::io::parse_design(path).unwrap();
    let design = StudyDesign::new(
        vec![1; shipped.n_labs()],
        shipped.sigma2_x().to_vec(),
        shipped.sigma2_rows().to_vec(),
    )
    .unwrap();
    let theta = ParameterVector::null_bias(vec![0.0; design.n_levels()], design.n_labs()).unwrap();
    let data = Measurements::new(vec![
        vec![vec![0.0]; design.n_levels()];
        design.n_labs()
    ])
    .unwrap();
    let kernels = compute_kernels(&theta, &data, &design).unwrap();

    let direct_sum: f64 = (0..design.n_labs()).map(|i| 1.0 / design.sigma2(i, 0)).sum();
    let expected = 1.0 + 0.0077 * direct_sum;
    assert!((kernels.a[0] - expected).abs() <= 1e-12 * expected);
    // the reciprocal sum is dominated by the most precise laboratory
    assert!(expected > 1.0 + 0.0077 * 2000.0);
}

#[test]
fn a_factor_increases_in_beta_and_replicas() {
    let design = StudyDesign::new(
        vec![2, 3],
        vec![0.3],
        vec![vec![0.2], vec![0.4]],
    )
    .unwrap();
    let data = Measurements::new(vec![vec![vec![0.0, 0.1]], vec![vec![0.2, 0.1, 0.0]]]).unwrap();
    let a_of = |beta: f64| {
        let theta = ParameterVector::new(vec![0.0], vec![0.0], vec![beta]).unwrap();
        compute_kernels(&theta, &data, &design).unwrap().a[0]
    };
    assert!(a_of(1.5) > a_of(1.2));
    assert!(a_of(-1.5) > a_of(1.2)); // depends on beta^2 only
    assert!(a_of(1.0) >= 1.0);

    // more replicas, larger a
    let design_more = StudyDesign::new(
        vec![2, 5],
        vec![0.3],
        vec![vec![0.2], vec![0.4]],
    )
    .unwrap();
    let data_more =
        Measurements::new(vec![vec![vec![0.0, 0.1]], vec![vec![0.2, 0.1, 0.0, 0.3, 0.2]]])
            .unwrap();
    let theta = ParameterVector::new(vec![0.0], vec![0.0], vec![1.2]).unwrap();
    let a_small = compute_kernels(&theta, &data, &design).unwrap().a[0];
    let a_large = compute_kernels(&theta, &data_more, &design_more).unwrap().a[0];
    assert!(a_large > a_small);
}

#[test]
fn quadratic_form_invariant_under_replicate_permutation() {
    for seed in 0..20 {
        let inst = random_instance(2000 + seed, 4, 3, 5);
        let base = compute_kernels(&inst.theta, &inst.data, &inst.design).unwrap();

        // rotate every cell's replicates by a random offset
        let mut r = rng(seed as u64);
        let y: Vec<Vec<Vec<f64>>> = (0..inst.data.n_labs())
            .map(|i| {
                (0..inst.data.n_levels())
                    .map(|j| {
                        let mut cell = inst.data.cell(i, j).to_vec();
                        let k = uniform_usize(&mut r, 0, cell.len() - 1);
                        cell.rotate_left(k);
                        if r.next_u64() % 2 == 0 {
                            cell.reverse();
                        }
                        cell
                    })
                    .collect()
            })
            .collect();
        let permuted = Measurements::new(y).unwrap();
        let shuffled = compute_kernels(&inst.theta, &permuted, &inst.design).unwrap();
        for j in 0..inst.design.n_levels() {
            assert!(base.q[j] >= 0.0);
            assert!(
                (base.q[j] - shuffled.q[j]).abs() <= 1e-11 * (1.0 + base.q[j]),
                "seed {seed} level {j}"
            );
        }
    }
}

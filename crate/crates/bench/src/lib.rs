//! Fixtures for the benchmarks.

use fedmix::federation::compute_report;
use fedmix::simgen::{generate_study, Study, StudyConfig};
use fedmix::{GradientReport, ModelParams};

/// One replication at the default simulation settings (K = 10, n = 1000,
/// d = 5, σ² = 2.5, a = 0.1).
pub fn default_study() -> Study {
    let cfg = StudyConfig {
        replications: 1,
        ..StudyConfig::default()
    };
    generate_study(&cfg, 0).expect("valid default config")
}

/// The truth with means shifted off the optimum.
pub fn perturbed(truth: &ModelParams) -> ModelParams {
    let means = truth
        .means()
        .iter()
        .enumerate()
        .map(|(c, m)| m.iter().map(|v| v + if c == 0 { 0.3 } else { -0.2 }).collect())
        .collect();
    truth.with_means(means).expect("same shape")
}

pub fn reports(study: &Study, theta: &ModelParams, round: u64) -> Vec<GradientReport> {
    study
        .datasets
        .iter()
        .enumerate()
        .map(|(j, ds)| {
            let (weights, grad_mu) = compute_report(ds, theta.site(j), study.covariance.site(j));
            GradientReport {
                site_id: j,
                round,
                weights,
                grad_mu,
            }
        })
        .collect()
}

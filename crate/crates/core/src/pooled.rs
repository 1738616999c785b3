//! EM on the union of all site data, the gold standard the federated
//! estimator approximates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FedMixError, Result};
use crate::metrics::d2_unaligned;
use crate::model::{clamp_weights, e_step, Covariance, ModelParams, SiteDataset};

/// Responsibility mass (relative to N) below which a class is declared dead.
pub const DEGENERATE_MASS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once d₂ between successive iterates drops below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-8,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(FedMixError::contract("max_iterations must be >= 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(FedMixError::contract("tolerance must be > 0"));
        }
        Ok(())
    }
}

/// Bytes moved in one federation round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub params: ModelParams,
    /// Observed-data log-likelihood; only available when the fitter can see
    /// every site's data.
    pub log_likelihood: Option<f64>,
    /// d₂ to the previous iterate; `None` for the initial point.
    pub step: Option<f64>,
    pub traffic: Option<RoundTraffic>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    MaxIterations,
}

/// The iterate sequence θ⁰, θ¹, … of one fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub entries: Vec<TraceEntry>,
    pub stop: StopReason,
}

impl FitTrace {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }

    pub fn final_params(&self) -> &ModelParams {
        &self.entries.last().expect("trace has the initial entry").params
    }

    /// Number of updates performed.
    pub fn iterations(&self) -> usize {
        self.entries.len() - 1
    }

    /// Iterate `t`, holding the last one once the fit has stopped.
    pub fn params_at(&self, t: usize) -> &ModelParams {
        &self.entries[t.min(self.entries.len() - 1)].params
    }

    pub fn log_likelihoods(&self) -> Vec<f64> {
        self.entries.iter().filter_map(|e| e.log_likelihood).collect()
    }

    /// True if the recorded log-likelihood never drops by more than `slack`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.log_likelihoods().windows(2).all(|w| w[1] >= w[0] - slack)
    }
}

/// Sufficient statistics of one E-step across all sites.
struct PooledStats {
    lambdas: Vec<Vec<f64>>,
    /// Σ_j (Σ_i w_ijc) Ω_j per class.
    precision_mass: Vec<DMatrix<f64>>,
    /// Σ_j Ω_j Σ_i w_ijc y_ij per class.
    moment: Vec<DVector<f64>>,
    mass: Vec<f64>,
    total: f64,
    log_likelihood: f64,
}

fn accumulate(datasets: &[SiteDataset], theta: &ModelParams, cov: &Covariance) -> PooledStats {
    let s = theta.classes();
    let d = theta.dim();
    let mut stats = PooledStats {
        lambdas: Vec::with_capacity(datasets.len()),
        precision_mass: vec![DMatrix::zeros(d, d); s],
        moment: vec![DVector::zeros(d); s],
        mass: vec![0.0; s],
        total: 0.0,
        log_likelihood: 0.0,
    };
    let mut ll = crate::numeric::CompensatedSum::default();
    let mut omega_y = vec![0.0; d];
    for (j, ds) in datasets.iter().enumerate() {
        let site_cov = cov.site(j);
        let (resp, site_ll) = e_step(ds, theta.site(j), site_cov);
        ll.add(site_ll);
        let mut class_mass = vec![0.0; s];
        let mut weighted_sum = vec![vec![0.0; d]; s];
        for (y, r) in ds.rows().zip(resp.rows()) {
            for c in 0..s {
                class_mass[c] += r[c];
                for k in 0..d {
                    weighted_sum[c][k] += r[c] * y[k];
                }
            }
        }
        let mut w = resp.class_means();
        clamp_weights(&mut w);
        stats.lambdas.push(w);
        let omega = site_cov.precision();
        for c in 0..s {
            stats.precision_mass[c] += omega * class_mass[c];
            site_cov.precision_mul(&weighted_sum[c], &mut omega_y);
            for k in 0..d {
                stats.moment[c][k] += omega_y[k];
            }
            stats.mass[c] += class_mass[c];
        }
        stats.total += ds.len() as f64;
    }
    stats.log_likelihood = ll.value();
    stats
}

fn solve_means(stats: &PooledStats) -> Result<Vec<Vec<f64>>> {
    stats
        .precision_mass
        .iter()
        .zip(&stats.moment)
        .enumerate()
        .map(|(c, (a, b))| {
            let degenerate = FedMixError::DegenerateClass {
                class: c,
                mass: stats.mass[c],
                iteration: 0,
            };
            if stats.mass[c] < DEGENERATE_MASS * stats.total {
                return Err(degenerate);
            }
            let chol = nalgebra::Cholesky::new(a.clone()).ok_or(degenerate)?;
            Ok(chol.solve(b).as_slice().to_vec())
        })
        .collect()
}

/// One pooled EM update θ^{t+1} = M_n(θ^t) using the closed-form M-step with
/// per-site precisions.
pub fn pooled_em_step(
    datasets: &[SiteDataset],
    theta: &ModelParams,
    cov: &Covariance,
) -> Result<ModelParams> {
    Ok(step_with_loglik(datasets, theta, cov)?.0)
}

/// Returns θ^{t+1} together with the log-likelihood at θ^t.
fn step_with_loglik(
    datasets: &[SiteDataset],
    theta: &ModelParams,
    cov: &Covariance,
) -> Result<(ModelParams, f64)> {
    theta.check_compatible(cov, datasets)?;
    let stats = accumulate(datasets, theta, cov);
    let means = solve_means(&stats)?;
    Ok((ModelParams::new(means, stats.lambdas)?, stats.log_likelihood))
}

/// Iterates pooled EM until d₂(θ^{t+1}, θ^t) < tolerance or the iteration cap.
pub fn run_pooled_em(
    datasets: &[SiteDataset],
    init: &ModelParams,
    cov: &Covariance,
    config: &EmConfig,
) -> Result<FitTrace> {
    config.validate()?;
    init.check_compatible(cov, datasets)?;
    let mut entries = vec![TraceEntry {
        iteration: 0,
        params: init.clone(),
        log_likelihood: None,
        step: None,
        traffic: None,
    }];
    let mut stop = StopReason::MaxIterations;
    for t in 0..config.max_iterations {
        let current = &entries[t].params;
        let (next, ll) =
            step_with_loglik(datasets, current, cov).map_err(|e| e.at_iteration(t + 1))?;
        let step = d2_unaligned(&next, current)?;
        entries[t].log_likelihood = Some(ll);
        entries.push(TraceEntry {
            iteration: t + 1,
            params: next,
            log_likelihood: None,
            step: Some(step),
            traffic: None,
        });
        if step < config.tolerance {
            stop = StopReason::Converged;
            break;
        }
    }
    let last = entries.last_mut().expect("non-empty");
    last.log_likelihood = Some(crate::model::mixture_log_likelihood(
        datasets,
        &last.params,
        cov,
    )?);
    Ok(FitTrace { entries, stop })
}

//! Replication harness: fits every requested estimator on simulated
//! studies and aggregates the results into the tables the CLI writes.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{average_estimator, local_em, sample_size_weights, uniform_weights, LocalEmConfig, LocalFit};
use crate::error::{FedMixError, Result};
use crate::federation::{CommLedger, Federation};
use crate::metrics::{aggregate, approximation_error, AggregateRow, EstimateRecord, Estimator, ReplicationSummary};
use crate::model::{Covariance, ModelParams, SiteDataset};
use crate::pooled::{run_pooled_em, EmConfig, FitTrace};
use crate::simgen::{generate_study, keyed_rng, StreamPurpose, StudyConfig};
use crate::surrogate::{federated_init, run_distributed_em};

/// One (σ², a, K, n) setting of the simulation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sigma2: f64,
    pub a: f64,
    pub sites: usize,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageWeighting {
    #[default]
    Uniform,
    SampleSize,
}

/// Estimator settings shared by every fit in a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub em: EmConfig,
    pub restarts: usize,
    pub weighting: AverageWeighting,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            restarts: 5,
            weighting: AverageWeighting::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub cells: Vec<Cell>,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    pub dim: usize,
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
    pub fit: FitOptions,
}

impl ExperimentPlan {
    /// σ² ∈ {2.5, 5}, a ∈ {0.1, 0.3}, K ∈ {10, 30}, n ∈ {1000, 3000}, R = 200.
    pub fn full_grid() -> Self {
        let mut cells = Vec::new();
        for sites in [10, 30] {
            for n in [1000, 3000] {
                cells.extend(Self::noise_cells(sites, n));
            }
        }
        Self::with_cells(cells)
    }

    /// The four (σ², a) cells at n = 1000, K = 10.
    pub fn base_grid() -> Self {
        Self::with_cells(Self::noise_cells(10, 1000))
    }

    pub fn noise_cells(sites: usize, n: usize) -> Vec<Cell> {
        let mut cells = Vec::new();
        for sigma2 in [2.5, 5.0] {
            for a in [0.1, 0.3] {
                cells.push(Cell { sigma2, a, sites, n });
            }
        }
        cells
    }

    pub fn with_cells(cells: Vec<Cell>) -> Self {
        let base = StudyConfig::default();
        Self {
            cells,
            replications: base.replications,
            estimators: Estimator::ALL.to_vec(),
            seed: base.seed,
            workers: 0,
            dim: base.dim,
            mu1: base.mu1,
            mu0: base.mu0,
            fit: FitOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(FedMixError::contract("experiment grid is empty"));
        }
        if self.replications == 0 {
            return Err(FedMixError::contract("replications must be >= 1"));
        }
        if self.estimators.is_empty() {
            return Err(FedMixError::contract("no estimators selected"));
        }
        self.fit.em.validate()?;
        for c in &self.cells {
            self.study_config(c).validate()?;
        }
        Ok(())
    }

    pub fn study_config(&self, cell: &Cell) -> StudyConfig {
        StudyConfig {
            sites: cell.sites,
            n: cell.n,
            dim: self.dim,
            a: cell.a,
            sigma2: cell.sigma2,
            mu1: self.mu1.clone(),
            mu0: self.mu0.clone(),
            seed: self.seed,
            replications: self.replications,
        }
    }
}

/// Seed for the k-means streams of one replication.
pub fn replication_seed(seed: u64, replication: u64) -> u64 {
    use rand::RngCore;
    keyed_rng(seed, replication, u64::MAX, StreamPurpose::KMeans).next_u64()
}

/// Output of one estimator on one dataset collection.
#[derive(Clone, Debug)]
pub struct EstimateOutput {
    pub estimator: Estimator,
    pub means: Vec<Vec<f64>>,
    /// Full parameters where the estimator produces them (the local fit
    /// covers the lead site only).
    pub params: Option<ModelParams>,
    pub trace: Option<FitTrace>,
    pub ledger: Option<CommLedger>,
}

/// Every fit made for one collection of sites.
#[derive(Clone, Debug)]
pub struct FitSet {
    pub outputs: Vec<EstimateOutput>,
    pub init: Option<ModelParams>,
    pub local_fits: Vec<LocalFit>,
}

impl FitSet {
    pub fn get(&self, estimator: Estimator) -> Option<&EstimateOutput> {
        self.outputs.iter().find(|o| o.estimator == estimator)
    }
}

/// Fits the requested estimators. The lead site's local EM provides the
/// initial means; the shared initial weights are negotiated through the
/// federation, so the distributed path touches remote data only through
/// site endpoints.
pub fn fit_estimators(
    datasets: &[SiteDataset],
    cov: &Covariance,
    estimators: &[Estimator],
    options: &FitOptions,
    kmeans_seed: u64,
) -> Result<FitSet> {
    if datasets.is_empty() {
        return Err(FedMixError::contract("no site data"));
    }
    let local_cfg = LocalEmConfig {
        em: EmConfig {
            seed: kmeans_seed,
            ..options.em
        },
        restarts: options.restarts,
        classes: 2,
    };
    let wants = |e: Estimator| estimators.contains(&e);
    let mut local_fits = vec![local_em(&datasets[0], cov.site(0), &local_cfg)?];
    if wants(Estimator::Average) {
        for (j, ds) in datasets.iter().enumerate().skip(1) {
            local_fits.push(local_em(ds, cov.site(j), &local_cfg)?);
        }
    }
    let lead_means = local_fits[0].means().to_vec();

    let mut outputs = Vec::new();
    let mut init = None;
    let mut federation = None;
    if wants(Estimator::Pooled) || wants(Estimator::Distributed) {
        let mut fed = Federation::new(datasets.to_vec(), cov.clone())?;
        init = Some(federated_init(&mut fed, lead_means.clone())?);
        federation = Some(fed);
    }
    for &est in estimators {
        let out = match est {
            Estimator::Local => EstimateOutput {
                estimator: est,
                means: lead_means.clone(),
                params: Some(local_fits[0].params.clone()),
                trace: Some(local_fits[0].trace.clone()),
                ledger: None,
            },
            Estimator::Average => {
                let weights = match options.weighting {
                    AverageWeighting::Uniform => uniform_weights(local_fits.len()),
                    AverageWeighting::SampleSize => sample_size_weights(&local_fits),
                };
                EstimateOutput {
                    estimator: est,
                    means: average_estimator(&local_fits, &weights)?,
                    params: None,
                    trace: None,
                    ledger: None,
                }
            }
            Estimator::Pooled => {
                let trace = run_pooled_em(datasets, init.as_ref().expect("init"), cov, &options.em)?;
                EstimateOutput {
                    estimator: est,
                    means: trace.final_params().means().to_vec(),
                    params: Some(trace.final_params().clone()),
                    trace: Some(trace),
                    ledger: None,
                }
            }
            Estimator::Distributed => {
                let fed = federation.as_mut().expect("federation");
                let trace = run_distributed_em(fed, init.as_ref().expect("init"), &options.em)?;
                EstimateOutput {
                    estimator: est,
                    means: trace.final_params().means().to_vec(),
                    params: Some(trace.final_params().clone()),
                    trace: Some(trace),
                    ledger: Some(fed.ledger().clone()),
                }
            }
        };
        outputs.push(out);
    }
    Ok(FitSet {
        outputs,
        init,
        local_fits,
    })
}

/// One replication of a study, with the fits kept for inspection.
#[derive(Clone, Debug)]
pub struct ReplicationRun {
    pub summary: ReplicationSummary,
    pub truth: ModelParams,
    pub fits: FitSet,
}

pub fn run_replication(
    cfg: &StudyConfig,
    replication: u64,
    estimators: &[Estimator],
    options: &FitOptions,
) -> Result<ReplicationRun> {
    let study = generate_study(cfg, replication)?;
    let fits = fit_estimators(
        &study.datasets,
        &study.covariance,
        estimators,
        options,
        replication_seed(cfg.seed, replication),
    )?;
    let records = fits
        .outputs
        .iter()
        .map(|o| EstimateRecord::new(o.estimator, &o.means, study.truth.means()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationRun {
        summary: ReplicationSummary {
            replication: replication as usize,
            records,
        },
        truth: study.truth,
        fits,
    })
}

/// Pooled and distributed EM for exactly `iterations` steps from the same
/// initial point.
#[derive(Clone, Debug)]
pub struct ApproximationRun {
    pub rel_errors: Vec<f64>,
    pub pooled: FitTrace,
    pub distributed: FitTrace,
}

pub fn approximation_run(
    cfg: &StudyConfig,
    replication: u64,
    iterations: usize,
    options: &FitOptions,
) -> Result<ApproximationRun> {
    let study = generate_study(cfg, replication)?;
    let fixed = FitOptions {
        em: EmConfig {
            max_iterations: iterations,
            tolerance: f64::MIN_POSITIVE,
            ..options.em
        },
        ..*options
    };
    let fits = fit_estimators(
        &study.datasets,
        &study.covariance,
        &[Estimator::Pooled, Estimator::Distributed],
        &fixed,
        replication_seed(cfg.seed, replication),
    )?;
    let pooled = fits.get(Estimator::Pooled).and_then(|o| o.trace.clone()).expect("pooled");
    let distributed = fits
        .get(Estimator::Distributed)
        .and_then(|o| o.trace.clone())
        .expect("distributed");
    let rel_errors = (0..=iterations)
        .map(|t| approximation_error(distributed.params_at(t).means(), pooled.params_at(t).means()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ApproximationRun {
        rel_errors,
        pooled,
        distributed,
    })
}

/// A replication that failed; the run continues without it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub cell: Cell,
    pub replication: usize,
    pub kind: String,
    pub message: String,
}

impl Failure {
    fn new(cell: Cell, replication: usize, err: &FedMixError) -> Self {
        Self {
            cell,
            replication,
            kind: err.kind().to_string(),
            message: err.to_string(),
        }
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| FedMixError::contract(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig1Row {
    pub cell: Cell,
    pub replication: usize,
    pub iteration: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Fig1Output {
    pub rows: Vec<Fig1Row>,
    pub failures: Vec<Failure>,
}

/// Relative distance between distributed and pooled iterates for the
/// first `iterations` steps in every cell and replication.
pub fn reproduce_fig1(plan: &ExperimentPlan, iterations: usize) -> Result<Fig1Output> {
    plan.validate()?;
    let mut out = Fig1Output::default();
    for cell in &plan.cells {
        let cfg = plan.study_config(cell);
        let runs: Vec<Result<ApproximationRun>> = with_pool(plan.workers, || {
            (0..plan.replications)
                .into_par_iter()
                .map(|r| approximation_run(&cfg, r as u64, iterations, &plan.fit))
                .collect()
        })?;
        for (r, run) in runs.into_iter().enumerate() {
            match run {
                Ok(run) => out.rows.extend(run.rel_errors.iter().enumerate().map(|(t, &e)| Fig1Row {
                    cell: *cell,
                    replication: r,
                    iteration: t,
                    rel_error: e,
                })),
                Err(e) => out.failures.push(Failure::new(*cell, r, &e)),
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub replications: Vec<ReplicationSummary>,
    pub rows: Vec<AggregateRow>,
    pub failures: Vec<Failure>,
}

/// Bias, variance and MSE of every estimator in every cell.
pub fn reproduce_bias_mse(plan: &ExperimentPlan) -> Result<Vec<CellResult>> {
    plan.validate()?;
    let mut results = Vec::with_capacity(plan.cells.len());
    for cell in &plan.cells {
        let cfg = plan.study_config(cell);
        let runs: Vec<Result<ReplicationSummary>> = with_pool(plan.workers, || {
            (0..plan.replications)
                .into_par_iter()
                .map(|r| run_replication(&cfg, r as u64, &plan.estimators, &plan.fit).map(|run| run.summary))
                .collect()
        })?;
        let mut summaries = Vec::new();
        let mut failures = Vec::new();
        for (r, run) in runs.into_iter().enumerate() {
            match run {
                Ok(s) => summaries.push(s),
                Err(e) => failures.push(Failure::new(*cell, r, &e)),
            }
        }
        let rows = if summaries.len() >= 2 { aggregate(&summaries)? } else { Vec::new() };
        results.push(CellResult {
            cell: *cell,
            replications: summaries,
            rows,
            failures,
        });
    }
    Ok(results)
}

pub const FIG1_HEADER: &str = "sigma2,a,K,n,rep,iter,rel_error";
pub const SUMMARY_HEADER: &str = "sigma2,a,K,n,estimator,replications,failures,bias,variance,mse";
pub const FAILURE_HEADER: &str = "sigma2,a,K,n,rep,kind,message";

fn cell_prefix(c: &Cell) -> String {
    format!("{},{},{},{}", c.sigma2, c.a, c.sites, c.n)
}

pub fn fig1_csv(rows: &[Fig1Row]) -> String {
    let mut s = String::from(FIG1_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:e}", cell_prefix(&r.cell), r.replication, r.iteration, r.rel_error);
    }
    s
}

pub fn summary_csv(results: &[CellResult]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for c in results {
        for row in &c.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                cell_prefix(&c.cell),
                row.estimator.name(),
                row.replications,
                c.failures.len(),
                row.bias,
                row.variance,
                row.mse
            );
        }
    }
    s
}

pub fn failures_csv(failures: &[Failure]) -> String {
    let mut s = String::from(FAILURE_HEADER);
    s.push('\n');
    for f in failures {
        let message = f.message.replace(['"', '\n'], " ");
        let _ = writeln!(s, "{},{},{},\"{}\"", cell_prefix(&f.cell), f.replication, f.kind, message);
    }
    s
}

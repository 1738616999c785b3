use std::path::{Path, PathBuf};

use fedmix::baselines::{local_em, LocalEmConfig};
use fedmix::experiment::{
    self, failures_csv, fig1_csv, fit_estimators, replication_seed, summary_csv, ExperimentPlan, FitOptions, FitSet,
};
use fedmix::metrics::{condition1_radius_check, snr, Condition1Constants};
use fedmix::simgen::{export_study, generate_study, read_metadata, read_sites, StudyConfig, StudyMetadata, METADATA_FILE};
use fedmix::{Covariance, FedMixError, ModelParams, Result, SiteDataset};
use nalgebra::DMatrix;

use crate::config::{parse_estimators, FileConfig};
use crate::output;
use crate::{BiasMseArgs, DataArgs, DiagnoseArgs, Fig1Args, FitArgs, SimulateArgs};

fn out_dir(flag: &Option<PathBuf>, default: &str) -> PathBuf {
    flag.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FedMixError + '_ {
    move |source| FedMixError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let file = FileConfig::load_optional(args.common.config.as_deref())?;
    let mut cfg = StudyConfig::default();
    file.apply_study(&mut cfg)?;
    if let Some(v) = args.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.sigma2 {
        cfg.sigma2 = v;
    }
    if let Some(v) = args.a {
        cfg.a = v;
    }
    if let Some(v) = args.sites {
        cfg.sites = v;
    }
    if let Some(v) = args.n {
        cfg.n = v;
    }
    let reps = args.reps.unwrap_or(1);
    if reps == 0 {
        return Err(FedMixError::contract("--reps must be >= 1"));
    }
    cfg.replications = reps;
    cfg.validate()?;
    let dir = out_dir(&args.common.out, "study");
    for r in args.rep..args.rep + reps as u64 {
        let target = if reps == 1 { dir.clone() } else { dir.join(format!("rep_{r:03}")) };
        let study = generate_study(&cfg, r)?;
        export_study(&target, &cfg, r, &study)?;
        println!("replication {r}: {} sites written to {}", cfg.sites, target.display());
    }
    Ok(())
}

/// Site data, covariance and the study sidecar when one is present.
pub struct LoadedData {
    pub datasets: Vec<SiteDataset>,
    pub cov: Covariance,
    pub metadata: Option<StudyMetadata>,
}

/// Site files named by `inputs`: a study directory (its sidecar order, or
/// every `*.csv` sorted by name) or an explicit list.
pub fn site_paths(inputs: &[PathBuf]) -> Result<(Vec<PathBuf>, Option<StudyMetadata>)> {
    if let [dir] = inputs {
        if dir.is_dir() {
            if dir.join(METADATA_FILE).exists() {
                let meta = read_metadata(dir)?;
                let paths = meta.site_files.iter().map(|f| dir.join(f)).collect();
                return Ok((paths, Some(meta)));
            }
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(io_err(dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(FedMixError::contract(format!("no .csv site files in {}", dir.display())));
            }
            return Ok((paths, None));
        }
    }
    Ok((inputs.to_vec(), None))
}

fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| FedMixError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("not a number: {:?}", f.trim()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(FedMixError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected a square matrix, found {d} rows"),
        });
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

pub fn load_data(args: &DataArgs) -> Result<LoadedData> {
    let (paths, metadata) = site_paths(&args.inputs)?;
    let datasets = read_sites(&paths)?;
    let k = datasets.len();
    let d = datasets[0].dim();
    let cov = if let Some(path) = &args.covariance {
        let sigma = read_matrix(path)?;
        if sigma.nrows() != d {
            return Err(FedMixError::DimensionMismatch {
                context: "covariance file vs site data",
                expected: d,
                actual: sigma.nrows(),
            });
        }
        Covariance::shared(sigma, k)?
    } else if let Some(s2) = args.sigma2.or(metadata.as_ref().map(|m| m.config.sigma2)) {
        Covariance::isotropic(d, s2, k)?
    } else {
        return Err(FedMixError::contract(
            "the covariance is unknown: pass --sigma2 or --covariance",
        ));
    };
    Ok(LoadedData { datasets, cov, metadata })
}

/// The k-means seed: from the sidecar's (seed, replication) unless a seed
/// is given, so a refit of an exported study repeats the in-memory fit.
pub fn kmeans_seed(seed: Option<u64>, metadata: Option<&StudyMetadata>) -> u64 {
    match (seed, metadata) {
        (Some(s), _) => replication_seed(s, 0),
        (None, Some(m)) => replication_seed(m.config.seed, m.replication),
        (None, None) => replication_seed(0, 0),
    }
}

pub fn fit_options(file: &FileConfig, max_iterations: Option<usize>, tolerance: Option<f64>) -> Result<FitOptions> {
    let mut plan = ExperimentPlan::base_grid();
    file.apply(&mut plan)?;
    let mut options = plan.fit;
    if let Some(v) = max_iterations {
        options.em.max_iterations = v;
    }
    if let Some(v) = tolerance {
        options.em.tolerance = v;
    }
    options.em.validate()?;
    Ok(options)
}

pub fn run_fit(args: &FitArgs) -> Result<FitSet> {
    let file = FileConfig::load_optional(args.common.config.as_deref())?;
    let estimators = parse_estimators(&args.estimators)?;
    let options = fit_options(&file, args.max_iterations, args.tolerance)?;
    let data = load_data(&args.data)?;
    let seed = kmeans_seed(args.common.seed.or(file.seed), data.metadata.as_ref());
    fit_estimators(&data.datasets, &data.cov, &estimators, &options, seed)
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let fits = run_fit(args)?;
    let dir = out_dir(&args.common.out, "fit");
    output::write(&dir, "estimates.csv", &output::estimates_csv(&fits.outputs))?;
    output::write(&dir, "weights.csv", &output::weights_csv(&fits.outputs))?;
    output::write(&dir, "trace.csv", &output::trace_csv(&fits.outputs))?;
    if let Some(ledger) = fits.outputs.iter().find_map(|o| o.ledger.as_ref()) {
        output::write(&dir, "ledger.csv", &output::ledger_csv(ledger))?;
    }
    for o in &fits.outputs {
        let iters = o.trace.as_ref().map(|t| format!(", {} iterations ({:?})", t.iterations(), t.stop));
        println!("{}: means {:?}{}", o.estimator.name(), o.means, iters.unwrap_or_default());
    }
    println!("results written to {}", dir.display());
    Ok(())
}

fn plan_for(base: ExperimentPlan, common: &crate::Common, reps: Option<usize>, workers: Option<usize>) -> Result<(ExperimentPlan, FileConfig)> {
    let file = FileConfig::load_optional(common.config.as_deref())?;
    let mut plan = base;
    file.apply(&mut plan)?;
    if let Some(v) = common.seed {
        plan.seed = v;
    }
    if let Some(v) = reps {
        plan.replications = v;
    }
    if let Some(v) = workers {
        plan.workers = v;
    }
    plan.validate()?;
    Ok((plan, file))
}

pub fn reproduce_fig1(args: &Fig1Args) -> Result<()> {
    let (plan, file) = plan_for(ExperimentPlan::base_grid(), &args.common, args.reps, args.workers)?;
    let iterations = args.iterations.or(file.iterations).unwrap_or(50);
    if iterations == 0 {
        return Err(FedMixError::contract("--iterations must be >= 1"));
    }
    let out = experiment::reproduce_fig1(&plan, iterations)?;
    let dir = out_dir(&args.common.out, "fig1");
    output::write(&dir, "fig1.csv", &fig1_csv(&out.rows))?;
    output::write(&dir, "failures.csv", &failures_csv(&out.failures))?;
    for cell in &plan.cells {
        let mut last: Vec<f64> = out
            .rows
            .iter()
            .filter(|r| r.cell == *cell && r.iteration == iterations)
            .map(|r| r.rel_error)
            .collect();
        last.sort_by(|a, b| a.total_cmp(b));
        let median = last.get(last.len() / 2).copied().unwrap_or(f64::NAN);
        println!(
            "sigma2={} a={} K={} n={}: median relative error at iteration {iterations} = {median:.3e}",
            cell.sigma2, cell.a, cell.sites, cell.n
        );
    }
    println!("{} failed replications; tables written to {}", out.failures.len(), dir.display());
    Ok(())
}

pub fn reproduce_bias_mse(args: &BiasMseArgs) -> Result<()> {
    let (mut plan, _) = plan_for(ExperimentPlan::full_grid(), &args.common, args.reps, args.workers)?;
    if let Some(list) = &args.estimators {
        plan.estimators = parse_estimators(list)?;
    }
    let results = experiment::reproduce_bias_mse(&plan)?;
    let dir = out_dir(&args.common.out, "bias-mse");
    let failures: Vec<_> = results.iter().flat_map(|r| r.failures.iter().cloned()).collect();
    let summary = summary_csv(&results);
    output::write(&dir, "summary.csv", &summary)?;
    output::write(&dir, "replications.csv", &output::replications_csv(&results))?;
    output::write(&dir, "failures.csv", &failures_csv(&failures))?;
    print!("{summary}");
    println!("{} failed replications; tables written to {}", failures.len(), dir.display());
    Ok(())
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    let report = diagnose_report(args)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = &args.common.out {
        output::write(dir, "diagnose.json", &text)?;
    }
    println!("{text}");
    Ok(())
}

pub fn diagnose_report(args: &DiagnoseArgs) -> Result<serde_json::Value> {
    let file = FileConfig::load_optional(args.common.config.as_deref())?;
    let options = fit_options(&file, None, None)?;
    let data = load_data(&args.data)?;
    let (min_eig, max_eig) = (0..data.cov.sites())
        .map(|j| data.cov.site(j).eigen_range())
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
    let sites: Vec<serde_json::Value> = data
        .datasets
        .iter()
        .map(|ds| {
            let mut mean = vec![0.0; ds.dim()];
            for row in ds.rows() {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= ds.len() as f64);
            serde_json::json!({ "site": ds.site_id(), "n": ds.len(), "mean": mean })
        })
        .collect();

    let seed = kmeans_seed(args.common.seed.or(file.seed), data.metadata.as_ref());
    let local_cfg = LocalEmConfig {
        em: fedmix::EmConfig { seed, ..options.em },
        restarts: options.restarts,
        classes: 2,
    };
    let lead = local_em(&data.datasets[0], data.cov.site(0), &local_cfg)?;
    let lead_means = lead.means().to_vec();
    let sigma = data.cov.site(0).sigma();
    let mut report = serde_json::json!({
        "sites": sites,
        "dim": data.datasets[0].dim(),
        "covariance_eigen_range": [min_eig, max_eig],
        "lead_local_fit": {
            "means": lead_means,
            "iterations": lead.trace.iterations(),
            "stop": format!("{:?}", lead.trace.stop),
        },
        "snr_estimated": snr(&lead_means[0], &lead_means[1], sigma)?,
    });
    if let Some(meta) = &data.metadata {
        let defaults = Condition1Constants::default();
        let constants = Condition1Constants {
            c0: args.c0.unwrap_or(defaults.c0),
            cw: args.cw.unwrap_or(defaults.cw),
            c1: args.c1.unwrap_or(defaults.c1),
        };
        let init = ModelParams::two_class(
            lead_means[0].clone(),
            lead_means[1].clone(),
            &vec![0.5; meta.truth.sites()],
        )?;
        let check = condition1_radius_check(&init, &meta.truth, sigma, constants, data.cov.eigen_bound())?;
        report["snr_true"] = serde_json::json!(meta.snr);
        report["initialization_check"] = serde_json::to_value(&check)?;
        report["constants"] = serde_json::to_value(constants)?;
    }
    Ok(report)
}

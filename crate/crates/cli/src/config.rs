//! TOML run configuration. Every key is optional; command-line flags
//! override whatever the file sets.

use std::path::Path;

use fedmix::experiment::{AverageWeighting, Cell, ExperimentPlan};
use fedmix::metrics::Estimator;
use fedmix::simgen::StudyConfig;
use fedmix::{FedMixError, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub workers: Option<usize>,
    pub dim: Option<usize>,
    pub mu1: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
    pub estimators: Option<Vec<Estimator>>,
    /// Iterations recorded by reproduce-fig1.
    pub iterations: Option<usize>,
    pub grid: Option<GridConfig>,
    pub fit: Option<FitConfig>,
    pub study: Option<StudySection>,
}

/// The simulation grid; the cells are the Cartesian product.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub sigma2: Vec<f64>,
    pub a: Vec<f64>,
    pub sites: Vec<usize>,
    pub n: Vec<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
    pub restarts: Option<usize>,
    pub weighting: Option<AverageWeighting>,
}

/// Single-study settings used by `simulate`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub sigma2: Option<f64>,
    pub a: Option<f64>,
    pub sites: Option<usize>,
    pub n: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| FedMixError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| FedMixError::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies the file's settings on top of `plan`.
    pub fn apply(&self, plan: &mut ExperimentPlan) -> Result<()> {
        if let Some(v) = self.seed {
            plan.seed = v;
        }
        if let Some(v) = self.replications {
            plan.replications = v;
        }
        if let Some(v) = self.workers {
            plan.workers = v;
        }
        self.apply_model(&mut plan.dim, &mut plan.mu1, &mut plan.mu0)?;
        if let Some(v) = &self.estimators {
            plan.estimators = v.clone();
        }
        if let Some(g) = &self.grid {
            plan.cells = grid_cells(g);
        }
        if let Some(f) = &self.fit {
            if let Some(v) = f.max_iterations {
                plan.fit.em.max_iterations = v;
            }
            if let Some(v) = f.tolerance {
                plan.fit.em.tolerance = v;
            }
            if let Some(v) = f.restarts {
                plan.fit.restarts = v;
            }
            if let Some(v) = f.weighting {
                plan.fit.weighting = v;
            }
        }
        Ok(())
    }

    /// Applies the file's settings on top of a single study.
    pub fn apply_study(&self, cfg: &mut StudyConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.replications {
            cfg.replications = v;
        }
        self.apply_model(&mut cfg.dim, &mut cfg.mu1, &mut cfg.mu0)?;
        if let Some(s) = &self.study {
            if let Some(v) = s.sigma2 {
                cfg.sigma2 = v;
            }
            if let Some(v) = s.a {
                cfg.a = v;
            }
            if let Some(v) = s.sites {
                cfg.sites = v;
            }
            if let Some(v) = s.n {
                cfg.n = v;
            }
        }
        Ok(())
    }

    /// `dim` alone rescales the default means to that length.
    fn apply_model(&self, dim: &mut usize, mu1: &mut Vec<f64>, mu0: &mut Vec<f64>) -> Result<()> {
        if let Some(d) = self.dim {
            *dim = d;
            mu1.resize(d, mu1.first().copied().unwrap_or(5.0));
            mu0.resize(d, mu0.first().copied().unwrap_or(4.0));
        }
        if let Some(v) = &self.mu1 {
            *mu1 = v.clone();
        }
        if let Some(v) = &self.mu0 {
            *mu0 = v.clone();
        }
        if mu1.len() != *dim || mu0.len() != *dim {
            return Err(FedMixError::contract(format!(
                "mu1 and mu0 must have dim = {} entries",
                dim
            )));
        }
        Ok(())
    }
}

pub fn grid_cells(g: &GridConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &sites in &g.sites {
        for &n in &g.n {
            for &sigma2 in &g.sigma2 {
                for &a in &g.a {
                    cells.push(Cell { sigma2, a, sites, n });
                }
            }
        }
    }
    cells
}

/// Parses a comma-separated estimator list.
pub fn parse_estimators(list: &str) -> Result<Vec<Estimator>> {
    let mut out: Vec<Estimator> = Vec::new();
    for name in list.split(',').filter(|s| !s.trim().is_empty()) {
        let e: Estimator = name.parse()?;
        if !out.contains(&e) {
            out.push(e);
        }
    }
    if out.is_empty() {
        return Err(FedMixError::contract("no estimators selected"));
    }
    Ok(out)
}

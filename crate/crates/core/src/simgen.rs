//! Synthetic multi-site studies and their on-disk format.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(master seed, replication, site, purpose)`, so sites and replications
//! get independent streams and any one of them can be regenerated alone.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FedMixError, Result};
use crate::model::{Covariance, ModelParams, SiteDataset};

/// What a stream is used for; part of the stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    MixingWeights = 1,
    Observations = 2,
    KMeans = 3,
}

/// A ChaCha20 stream whose 256-bit seed is the four key words.
pub fn keyed_rng(seed: u64, replication: u64, site: u64, purpose: StreamPurpose) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replication.to_le_bytes());
    key[16..24].copy_from_slice(&site.to_le_bytes());
    key[24..32].copy_from_slice(&(purpose as u64).to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub sites: usize,
    pub n: usize,
    pub dim: usize,
    /// Half-width of the uniform distribution of the site weights around 0.5.
    pub a: f64,
    /// Isotropic noise variance.
    pub sigma2: f64,
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
    pub seed: u64,
    pub replications: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self::standard(2.5, 0.1, 10, 1000)
    }
}

impl StudyConfig {
    /// d = 5 with true means (5, …, 5) and (4, …, 4), R = 200.
    pub fn standard(sigma2: f64, a: f64, sites: usize, n: usize) -> Self {
        Self {
            sites,
            n,
            dim: 5,
            a,
            sigma2,
            mu1: vec![5.0; 5],
            mu0: vec![4.0; 5],
            seed: 20240101,
            replications: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedMixError::contract(m));
        if self.sites == 0 || self.n == 0 || self.dim == 0 {
            return bad("sites, n and dim must be positive".into());
        }
        if !(0.0..0.5).contains(&self.a) {
            return bad(format!("a = {} must lie in [0, 0.5)", self.a));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 = {} must be positive", self.sigma2));
        }
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        if self.mu1.len() != self.dim || self.mu0.len() != self.dim {
            return bad(format!("true means must have length {}", self.dim));
        }
        if self.mu1.iter().chain(&self.mu0).any(|v| !v.is_finite()) {
            return bad("true means must be finite".into());
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<Covariance> {
        Covariance::isotropic(self.dim, self.sigma2, self.sites)
    }
}

/// One replication of a study: site data and the parameters that generated it.
#[derive(Clone, Debug)]
pub struct Study {
    pub datasets: Vec<SiteDataset>,
    pub truth: ModelParams,
    pub covariance: Covariance,
    /// Latent class of every observation, `true` for the first class.
    pub labels: Vec<Vec<bool>>,
}

/// Draws replication `replication` of `cfg`.
pub fn generate_study(cfg: &StudyConfig, replication: u64) -> Result<Study> {
    cfg.validate()?;
    let lambdas: Vec<f64> = (0..cfg.sites)
        .map(|j| {
            let mut rng = keyed_rng(cfg.seed, replication, j as u64, StreamPurpose::MixingWeights);
            let u: f64 = rng.random();
            0.5 - cfg.a + 2.0 * cfg.a * u
        })
        .collect();
    let sd = cfg.sigma2.sqrt();
    let mut datasets = Vec::with_capacity(cfg.sites);
    let mut labels = Vec::with_capacity(cfg.sites);
    for (j, &lambda) in lambdas.iter().enumerate() {
        let mut rng = keyed_rng(cfg.seed, replication, j as u64, StreamPurpose::Observations);
        let mut values = Vec::with_capacity(cfg.n * cfg.dim);
        let mut site_labels = Vec::with_capacity(cfg.n);
        for _ in 0..cfg.n {
            let first = rng.random_bool(lambda);
            let mean = if first { &cfg.mu1 } else { &cfg.mu0 };
            for m in mean {
                let z: f64 = rng.sample(StandardNormal);
                values.push(m + sd * z);
            }
            site_labels.push(first);
        }
        datasets.push(SiteDataset::new(j, cfg.dim, values)?);
        labels.push(site_labels);
    }
    let truth = ModelParams::two_class(cfg.mu1.clone(), cfg.mu0.clone(), &lambdas)?;
    Ok(Study {
        datasets,
        truth,
        covariance: cfg.covariance()?,
        labels,
    })
}

/// Sidecar written next to exported site files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyMetadata {
    pub config: StudyConfig,
    pub replication: u64,
    pub truth: ModelParams,
    pub snr: f64,
    pub site_files: Vec<String>,
}

pub const METADATA_FILE: &str = "study.json";

pub fn site_file_name(site: usize) -> String {
    format!("site_{site:03}.csv")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FedMixError + '_ {
    move |source| FedMixError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one site's observations: a header `y1,…,yd` then one row per
/// observation. Values use the shortest representation that parses back
/// to the same `f64`.
pub fn write_site_csv(path: &Path, data: &SiteDataset) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let header: Vec<String> = (1..=data.dim()).map(|k| format!("y{k}")).collect();
    writeln!(out, "{}", header.join(",")).map_err(io_err(path))?;
    let mut line = String::new();
    for row in data.rows() {
        line.clear();
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads a site file written by [`write_site_csv`].
pub fn read_site_csv(path: &Path, site_id: usize) -> Result<SiteDataset> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let parse_err = |line: usize, message: String| FedMixError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(io_err(path))?,
        None => return Err(parse_err(1, "empty file, expected a header row".into())),
    };
    let columns: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if columns.iter().any(|c| c.is_empty()) {
        return Err(parse_err(1, "empty column name in header".into()));
    }
    let dim = columns.len();
    let mut values = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != dim {
            return Err(parse_err(
                line_no,
                format!("expected {dim} columns, found {}", fields.len()),
            ));
        }
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                parse_err(line_no, format!("column {} is not a number: {f:?}", columns[k]))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("column {} is not finite", columns[k])));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(parse_err(2, "no observations".into()));
    }
    SiteDataset::new(site_id, dim, values)
}

/// Writes every site file plus the metadata sidecar into `dir`.
pub fn export_study(
    dir: &Path,
    cfg: &StudyConfig,
    replication: u64,
    study: &Study,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut paths = Vec::with_capacity(study.datasets.len());
    let mut names = Vec::with_capacity(study.datasets.len());
    for (j, ds) in study.datasets.iter().enumerate() {
        let name = site_file_name(j);
        let path = dir.join(&name);
        write_site_csv(&path, ds)?;
        paths.push(path);
        names.push(name);
    }
    let meta = StudyMetadata {
        config: cfg.clone(),
        replication,
        truth: study.truth.clone(),
        snr: crate::metrics::snr(
            &cfg.mu1,
            &cfg.mu0,
            study.covariance.site(0).sigma(),
        )?,
        site_files: names,
    };
    let meta_path = dir.join(METADATA_FILE);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, json).map_err(io_err(&meta_path))?;
    Ok(paths)
}

pub fn read_metadata(dir: &Path) -> Result<StudyMetadata> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads site files in order; site ids are their positions.
pub fn read_sites(paths: &[PathBuf]) -> Result<Vec<SiteDataset>> {
    let data: Vec<SiteDataset> = paths
        .iter()
        .enumerate()
        .map(|(j, p)| read_site_csv(p, j))
        .collect::<Result<_>>()?;
    if let Some(first) = data.first() {
        if let Some((j, bad)) = data.iter().enumerate().find(|(_, d)| d.dim() != first.dim()) {
            return Err(FedMixError::Parse {
                path: paths[j].clone(),
                line: 1,
                message: format!("{} columns, but the first site has {}", bad.dim(), first.dim()),
            });
        }
    }
    Ok(data)
}

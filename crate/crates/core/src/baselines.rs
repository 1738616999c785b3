//! Comparison estimators: per-site local EM started from k-means, and the
//! label-matched average of local fits.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedMixError, Result};
use crate::model::{Covariance, ModelParams, SiteCovariance, SiteDataset};
use crate::numeric::l2_distance;
use crate::pooled::{run_pooled_em, EmConfig, FitTrace};
use crate::simgen::{keyed_rng, StreamPurpose};
use crate::surrogate::plug_in_init;

const LLOYD_MAX_ITERATIONS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares.
    pub wcss: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(y: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(y, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// `s` centroids from distinct data values, in random row order. Falls back
/// to repeated values only when the data has fewer than `s` distinct rows.
fn seed_centroids<R: Rng>(rows: &[&[f64]], s: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(s);
    for &i in &order {
        if chosen.len() == s {
            break;
        }
        if !chosen.iter().any(|c| c.as_slice() == rows[i]) {
            chosen.push(rows[i].to_vec());
        }
    }
    let mut k = 0;
    while chosen.len() < s {
        chosen.push(rows[order[k]].to_vec());
        k += 1;
    }
    chosen
}

fn lloyd(rows: &[&[f64]], mut centroids: Vec<Vec<f64>>) -> KMeansFit {
    let s = centroids.len();
    let d = rows[0].len();
    let mut assign = vec![usize::MAX; rows.len()];
    for _ in 0..LLOYD_MAX_ITERATIONS {
        let mut changed = false;
        for (i, y) in rows.iter().enumerate() {
            let (c, _) = nearest(y, &centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; s];
        let mut counts = vec![0usize; s];
        for (y, &c) in rows.iter().zip(&assign) {
            counts[c] += 1;
            for k in 0..d {
                sums[c][k] += y[k];
            }
        }
        for c in 0..s {
            if counts[c] > 0 {
                for k in 0..d {
                    centroids[c][k] = sums[c][k] / counts[c] as f64;
                }
            }
        }
        // Empty clusters move to the point farthest from its own centroid.
        for c in 0..s {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..rows.len())
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| {
                    sq_dist(rows[a], &centroids[assign[a]])
                        .total_cmp(&sq_dist(rows[b], &centroids[assign[b]]))
                });
            if let Some(i) = far {
                counts[assign[i]] -= 1;
                counts[c] = 1;
                assign[i] = c;
                centroids[c] = rows[i].to_vec();
            }
        }
    }
    let wcss = rows.iter().map(|y| nearest(y, &centroids).1).sum();
    KMeansFit { centroids, wcss }
}

/// Lloyd's algorithm from `restarts` random seedings drawn from one stream;
/// the run with the smallest WCSS wins (earliest on ties).
pub fn kmeans_init(data: &SiteDataset, classes: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    if classes == 0 || restarts == 0 {
        return Err(FedMixError::contract("k-means needs at least one class and one restart"));
    }
    if data.len() < classes {
        return Err(FedMixError::contract(format!(
            "k-means with {classes} classes needs at least {classes} observations, got {}",
            data.len()
        )));
    }
    let rows: Vec<&[f64]> = data.rows().collect();
    let mut rng = keyed_rng(seed, 0, data.site_id() as u64, StreamPurpose::KMeans);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts {
        let fit = lloyd(&rows, seed_centroids(&rows, classes, &mut rng));
        if best.as_ref().is_none_or(|b| fit.wcss < b.wcss) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalEmConfig {
    pub em: EmConfig,
    pub restarts: usize,
    pub classes: usize,
}

impl Default for LocalEmConfig {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            restarts: 5,
            classes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalFit {
    pub site_id: usize,
    pub observations: usize,
    pub params: ModelParams,
    pub trace: FitTrace,
}

impl LocalFit {
    pub fn means(&self) -> &[Vec<f64>] {
        self.params.means()
    }
}

/// Single-site EM from k-means centroids, with initial weights from the
/// plug-in rule at uniform weights. The k-means stream uses `config.em.seed`.
pub fn local_em(site: &SiteDataset, cov: &Arc<SiteCovariance>, config: &LocalEmConfig) -> Result<LocalFit> {
    let km = kmeans_init(site, config.classes, config.restarts, config.em.seed)?;
    let single = Covariance::from_sites(vec![Arc::clone(cov)])?;
    let data = std::slice::from_ref(site);
    let init = plug_in_init(data, km.centroids, &single)?;
    let trace = run_pooled_em(data, &init, &single, &config.em)?;
    Ok(LocalFit {
        site_id: site.site_id(),
        observations: site.len(),
        params: trace.final_params().clone(),
        trace,
    })
}

pub fn uniform_weights(sites: usize) -> Vec<f64> {
    vec![1.0 / sites as f64; sites]
}

pub fn sample_size_weights(fits: &[LocalFit]) -> Vec<f64> {
    let total: usize = fits.iter().map(|f| f.observations).sum();
    fits.iter().map(|f| f.observations as f64 / total as f64).collect()
}

/// Whether `means` must swap labels to match `anchor`: keep when
/// `‖m₁ − a₁‖ + ‖m₀ − a₀‖ < ‖m₁ − a₀‖ + ‖m₀ − a₁‖`, swap otherwise.
pub fn needs_swap(means: &[Vec<f64>], anchor: &[Vec<f64>]) -> bool {
    let keep = l2_distance(&means[0], &anchor[0]) + l2_distance(&means[1], &anchor[1]);
    let swap = l2_distance(&means[0], &anchor[1]) + l2_distance(&means[1], &anchor[0]);
    !(keep < swap)
}

/// Weighted average of the local means after matching each fit's labels to
/// the first fit.
pub fn average_estimator(fits: &[LocalFit], weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    let Some(anchor) = fits.first() else {
        return Err(FedMixError::contract("average estimator needs at least one fit"));
    };
    if fits.iter().any(|f| f.params.classes() != 2) {
        return Err(FedMixError::Unsupported(
            "label matching for the average estimator is defined for two classes only".into(),
        ));
    }
    if weights.len() != fits.len() {
        return Err(FedMixError::DimensionMismatch {
            context: "average weights vs fits",
            expected: fits.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(FedMixError::contract("average weights must be non-negative and sum to 1"));
    }
    let d = anchor.params.dim();
    if fits.iter().any(|f| f.params.dim() != d) {
        return Err(FedMixError::contract("local fits have different dimensions"));
    }
    let mut out = vec![vec![0.0; d]; 2];
    for (f, w) in fits.iter().zip(weights) {
        let m = f.means();
        let (first, second) = if needs_swap(m, anchor.means()) { (&m[1], &m[0]) } else { (&m[0], &m[1]) };
        for k in 0..d {
            out[0][k] += w * first[k];
            out[1][k] += w * second[k];
        }
    }
    Ok(out)
}

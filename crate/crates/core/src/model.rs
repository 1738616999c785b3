//! Heterogeneous Gaussian mixture: shared class means, per-site mixing
//! proportions and known per-site covariances.
//!
//! Component ordering follows the two-class convention used throughout the
//! crate: component `0` is the class whose site proportion is `λ_j`
//! (usually written μ₁), component `1` carries `1 − λ_j` (μ₀). Stacked
//! gradient vectors use the same order.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{FedMixError, Result};
use crate::numeric::{softmax_in_place, CompensatedSum};

/// Lower clamp for every mixing proportion; the upper clamp is `1 − LAMBDA_FLOOR`.
pub const LAMBDA_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observations held by one site, stored row-major.
///
/// Every full pass over the rows goes through [`SiteDataset::rows`], which
/// bumps a shared access counter so tests can audit who touched the data.
#[derive(Clone, Debug)]
pub struct SiteDataset {
    site_id: usize,
    dim: usize,
    values: Arc<[f64]>,
    reads: Arc<AtomicU64>,
}

impl SiteDataset {
    pub fn new(site_id: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(FedMixError::contract("observation dimension must be >= 1"));
        }
        if values.is_empty() || values.len() % dim != 0 {
            return Err(FedMixError::contract(format!(
                "site {site_id}: {} values do not form a non-empty n x {dim} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedMixError::contract(format!(
                "site {site_id}: observations must be finite"
            )));
        }
        Ok(Self {
            site_id,
            dim,
            values: values.into(),
            reads: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn from_rows(site_id: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(FedMixError::DimensionMismatch {
                context: "SiteDataset::from_rows",
                expected: dim,
                actual: bad.len(),
            });
        }
        Self::new(site_id, dim, rows.concat())
    }

    pub fn site_id(&self) -> usize {
        self.site_id
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Iterates the observations. Counts as one access.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.values.chunks_exact(self.dim)
    }

    /// Number of row passes made over this dataset (shared between clones).
    pub fn access_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn with_site_id(mut self, site_id: usize) -> Self {
        self.site_id = site_id;
        self
    }
}

/// A known covariance matrix with its Cholesky factor and precision.
#[derive(Debug)]
pub struct SiteCovariance {
    sigma: DMatrix<f64>,
    /// Cholesky factor, row-major.
    lower: Vec<f64>,
    inv_diag: Vec<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl SiteCovariance {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        Self::for_site(0, sigma)
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(FedMixError::InvalidCovariance {
                site: 0,
                reason: format!("variance {variance} is not positive"),
            });
        }
        Self::new(DMatrix::from_diagonal_element(dim, dim, variance))
    }

    fn for_site(site: usize, sigma: DMatrix<f64>) -> Result<Self> {
        let invalid = |reason: String| FedMixError::InvalidCovariance { site, reason };
        let d = sigma.nrows();
        if d == 0 || sigma.ncols() != d {
            return Err(invalid(format!(
                "expected a non-empty square matrix, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(invalid("entries must be finite".into()));
        }
        let scale = sigma.amax();
        for a in 0..d {
            for b in 0..a {
                if (sigma[(a, b)] - sigma[(b, a)]).abs() > 1e-12 * scale {
                    return Err(invalid(format!("not symmetric at ({a}, {b})")));
                }
            }
        }
        let chol = nalgebra::Cholesky::new(sigma.clone())
            .ok_or_else(|| invalid("Cholesky factorization failed (not positive definite)".into()))?;
        let lower = chol.l();
        let log_det: f64 = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let inv_diag = lower.diagonal().iter().map(|v| 1.0 / v).collect();
        let lower = (0..d).flat_map(|a| (0..d).map(move |b| (a, b))).map(|(a, b)| lower[(a, b)]).collect();
        Ok(Self {
            sigma,
            lower,
            inv_diag,
            precision,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Eigenvalue range of Σ.
    pub fn eigen_range(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.sigma.clone()).eigenvalues;
        (eig.min(), eig.max())
    }

    /// `(y − μ)ᵀ Σ⁻¹ (y − μ)`, using `scratch` (length d) for the residual.
    pub fn mahalanobis_sq(&self, y: &[f64], mean: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.dim();
        for k in 0..d {
            scratch[k] = y[k] - mean[k];
        }
        // forward substitution L z = (y − μ)
        let mut total = 0.0;
        for a in 0..d {
            let row = &self.lower[a * d..a * d + a];
            let mut v = scratch[a];
            for (l, z) in row.iter().zip(&scratch[..a]) {
                v -= l * z;
            }
            v *= self.inv_diag[a];
            scratch[a] = v;
            total += v * v;
        }
        total
    }

    /// Gaussian log density `ln N(y; μ, Σ)`.
    pub fn log_density(&self, y: &[f64], mean: &[f64], scratch: &mut [f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(y, mean, scratch)
    }

    /// `out = Σ⁻¹ v`.
    pub fn precision_mul(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                acc += self.precision[(a, b)] * v[b];
            }
            out[a] = acc;
        }
    }
}

/// Known covariances for every site. Sites built through [`Covariance::shared`]
/// point at one factorization.
#[derive(Clone, Debug)]
pub struct Covariance {
    sites: Vec<Arc<SiteCovariance>>,
}

impl Covariance {
    pub fn shared(sigma: DMatrix<f64>, sites: usize) -> Result<Self> {
        if sites == 0 {
            return Err(FedMixError::contract("covariance needs at least one site"));
        }
        let one = Arc::new(SiteCovariance::new(sigma)?);
        Ok(Self {
            sites: vec![one; sites],
        })
    }

    /// `σ² I_d` shared by all sites.
    pub fn isotropic(dim: usize, variance: f64, sites: usize) -> Result<Self> {
        if sites == 0 {
            return Err(FedMixError::contract("covariance needs at least one site"));
        }
        let one = Arc::new(SiteCovariance::isotropic(dim, variance)?);
        Ok(Self {
            sites: vec![one; sites],
        })
    }

    pub fn per_site(sigmas: Vec<DMatrix<f64>>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(FedMixError::contract("covariance needs at least one site"));
        }
        let d = sigmas[0].nrows();
        let sites = sigmas
            .into_iter()
            .enumerate()
            .map(|(j, s)| {
                if s.nrows() != d {
                    return Err(FedMixError::DimensionMismatch {
                        context: "Covariance::per_site",
                        expected: d,
                        actual: s.nrows(),
                    });
                }
                SiteCovariance::for_site(j, s).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sites })
    }

    pub fn from_sites(sites: Vec<Arc<SiteCovariance>>) -> Result<Self> {
        let Some(first) = sites.first() else {
            return Err(FedMixError::contract("covariance needs at least one site"));
        };
        let d = first.dim();
        if let Some(bad) = sites.iter().find(|s| s.dim() != d) {
            return Err(FedMixError::DimensionMismatch {
                context: "Covariance::from_sites",
                expected: d,
                actual: bad.dim(),
            });
        }
        Ok(Self { sites })
    }

    pub fn sites(&self) -> usize {
        self.sites.len()
    }

    pub fn dim(&self) -> usize {
        self.sites[0].dim()
    }

    pub fn site(&self, j: usize) -> &Arc<SiteCovariance> {
        &self.sites[j]
    }

    /// Single-site view, used for local fits.
    pub fn single(&self, j: usize) -> Covariance {
        Covariance {
            sites: vec![Arc::clone(&self.sites[j])],
        }
    }

    /// Checks every Σ_j has eigenvalues in `[1/M, M]`.
    pub fn validate_eigen_bound(&self, bound: f64) -> Result<()> {
        if !(bound >= 1.0) {
            return Err(FedMixError::contract(format!(
                "eigenvalue bound M must be >= 1, got {bound}"
            )));
        }
        for (j, s) in self.sites.iter().enumerate() {
            let (lo, hi) = s.eigen_range();
            if lo < 1.0 / bound || hi > bound {
                return Err(FedMixError::InvalidCovariance {
                    site: j,
                    reason: format!("eigenvalues [{lo}, {hi}] outside [1/{bound}, {bound}]"),
                });
            }
        }
        Ok(())
    }

    /// Smallest M with every Σ_j's spectrum inside `[1/M, M]`.
    pub fn eigen_bound(&self) -> f64 {
        self.sites
            .iter()
            .map(|s| {
                let (lo, hi) = s.eigen_range();
                hi.max(1.0 / lo)
            })
            .fold(1.0, f64::max)
    }
}

/// θ: class means shared by all sites plus per-site mixing weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    means: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

/// The per-site view θ_j = (mixing weights of site j, shared means).
#[derive(Clone, Copy, Debug)]
pub struct SiteParams<'a> {
    pub weights: &'a [f64],
    pub means: &'a [Vec<f64>],
}

impl ModelParams {
    /// `means` holds S class centroids, `weights` one probability vector of
    /// length S per site.
    pub fn new(means: Vec<Vec<f64>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let classes = means.len();
        if classes < 2 {
            return Err(FedMixError::contract(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if weights.is_empty() {
            return Err(FedMixError::contract("need at least one site"));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(FedMixError::contract("mean dimension must be >= 1"));
        }
        for m in &means {
            if m.len() != d {
                return Err(FedMixError::DimensionMismatch {
                    context: "ModelParams means",
                    expected: d,
                    actual: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(FedMixError::contract("means must be finite"));
            }
        }
        for (j, w) in weights.iter().enumerate() {
            if w.len() != classes {
                return Err(FedMixError::DimensionMismatch {
                    context: "ModelParams weights",
                    expected: classes,
                    actual: w.len(),
                });
            }
            let total: f64 = w.iter().sum();
            let in_range = w
                .iter()
                .all(|&v| v.is_finite() && v >= LAMBDA_FLOOR * (1.0 - 1e-9) && v <= 1.0 - LAMBDA_FLOOR * (1.0 - 1e-9));
            if !in_range || (total - 1.0).abs() > 1e-9 {
                return Err(FedMixError::contract(format!(
                    "site {j}: mixing weights {w:?} must lie in [{LAMBDA_FLOOR}, 1-{LAMBDA_FLOOR}] and sum to 1"
                )));
            }
        }
        Ok(Self { means, weights })
    }

    /// Two-class parameters: `mu1` carries weight `λ_j`, `mu0` carries `1 − λ_j`.
    pub fn two_class(mu1: Vec<f64>, mu0: Vec<f64>, lambdas: &[f64]) -> Result<Self> {
        let weights = lambdas.iter().map(|&l| vec![l, 1.0 - l]).collect();
        Self::new(vec![mu1, mu0], weights)
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn sites(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn weights(&self, site: usize) -> &[f64] {
        &self.weights[site]
    }

    pub fn all_weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Proportion of component 0 at `site`.
    pub fn lambda(&self, site: usize) -> f64 {
        self.weights[site][0]
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w[0]).collect()
    }

    pub fn site(&self, site: usize) -> SiteParams<'_> {
        SiteParams {
            weights: &self.weights[site],
            means: &self.means,
        }
    }

    /// Means concatenated in component order.
    pub fn stacked_means(&self) -> Vec<f64> {
        self.means.concat()
    }

    pub fn with_means(&self, means: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(means, self.weights.clone())
    }

    /// Relabels components: new component `c` is old component `perm[c]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        debug_assert_eq!(perm.len(), self.classes());
        Self {
            means: perm.iter().map(|&c| self.means[c].clone()).collect(),
            weights: self
                .weights
                .iter()
                .map(|w| perm.iter().map(|&c| w[c]).collect())
                .collect(),
        }
    }

    /// Two-class label swap: (μ₁, μ₀, λ) → (μ₀, μ₁, 1 − λ).
    pub fn swapped_labels(&self) -> Self {
        let mut perm: Vec<usize> = (0..self.classes()).collect();
        perm.swap(0, 1);
        let mut out = self.permuted(&perm);
        if self.classes() == 2 {
            // keep the exact 1 − λ complement
            for (w, orig) in out.weights.iter_mut().zip(&self.weights) {
                w[0] = 1.0 - orig[0];
                w[1] = orig[0];
            }
        }
        out
    }

    pub fn check_compatible(&self, cov: &Covariance, datasets: &[SiteDataset]) -> Result<()> {
        if datasets.len() != self.sites() {
            return Err(FedMixError::DimensionMismatch {
                context: "number of sites",
                expected: self.sites(),
                actual: datasets.len(),
            });
        }
        self.check_lead(cov, datasets)
    }

    /// Like [`check_compatible`](Self::check_compatible) for a lead site that
    /// only sees some of the data.
    pub fn check_lead(&self, cov: &Covariance, datasets: &[SiteDataset]) -> Result<()> {
        if cov.sites() != self.sites() {
            return Err(FedMixError::DimensionMismatch {
                context: "covariance sites",
                expected: self.sites(),
                actual: cov.sites(),
            });
        }
        if cov.dim() != self.dim() {
            return Err(FedMixError::DimensionMismatch {
                context: "covariance dimension",
                expected: self.dim(),
                actual: cov.dim(),
            });
        }
        for ds in datasets {
            if ds.dim() != self.dim() {
                return Err(FedMixError::DimensionMismatch {
                    context: "observation dimension",
                    expected: self.dim(),
                    actual: ds.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Clamps a site's mixing weights into `[LAMBDA_FLOOR, 1 − LAMBDA_FLOOR]`.
///
/// With two classes the second weight is always the exact complement of the
/// first.
pub fn clamp_weights(weights: &mut [f64]) {
    if weights.len() == 2 {
        let l = weights[0].clamp(LAMBDA_FLOOR, 1.0 - LAMBDA_FLOOR);
        weights[0] = l;
        weights[1] = 1.0 - l;
        return;
    }
    if weights.iter().all(|&w| (LAMBDA_FLOOR..=1.0 - LAMBDA_FLOOR).contains(&w)) {
        return;
    }
    for w in weights.iter_mut() {
        *w = w.max(LAMBDA_FLOOR);
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
}

/// Posterior class probabilities, one row of S entries per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    classes: usize,
    probs: Vec<f64>,
}

impl Responsibilities {
    pub(crate) fn from_probs(classes: usize, probs: Vec<f64>) -> Self {
        Self { classes, probs }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.classes)
    }

    /// Mean responsibility per class.
    pub fn class_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.classes];
        for row in self.rows() {
            for (a, r) in acc.iter_mut().zip(row) {
                *a += r;
            }
        }
        let n = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

fn check_site_params(p: &SiteParams<'_>, cov: &SiteCovariance, y_dim: usize) -> Result<()> {
    if p.weights.len() != p.means.len() {
        return Err(FedMixError::DimensionMismatch {
            context: "weights vs means",
            expected: p.means.len(),
            actual: p.weights.len(),
        });
    }
    for m in p.means {
        if m.len() != cov.dim() {
            return Err(FedMixError::DimensionMismatch {
                context: "mean vs covariance",
                expected: cov.dim(),
                actual: m.len(),
            });
        }
    }
    if y_dim != cov.dim() {
        return Err(FedMixError::DimensionMismatch {
            context: "observation vs covariance",
            expected: cov.dim(),
            actual: y_dim,
        });
    }
    Ok(())
}

/// Fills `out[c] = ln w_c + ln N(y; μ_c, Σ)` given `log_weights[c] = ln w_c`.
#[inline]
pub(crate) fn log_joint(
    y: &[f64],
    log_weights: &[f64],
    means: &[Vec<f64>],
    cov: &SiteCovariance,
    out: &mut [f64],
    scratch: &mut [f64],
) {
    for (c, (m, lw)) in means.iter().zip(log_weights).enumerate() {
        out[c] = lw + cov.log_density(y, m, scratch);
    }
}

pub(crate) fn log_weights(weights: &[f64]) -> Vec<f64> {
    weights.iter().map(|w| w.ln()).collect()
}

/// Posterior class probabilities of one observation under θ_j.
pub fn responsibility(y: &[f64], p: SiteParams<'_>, cov: &SiteCovariance) -> Result<Vec<f64>> {
    check_site_params(&p, cov, y.len())?;
    let mut out = vec![0.0; p.means.len()];
    let mut scratch = vec![0.0; y.len()];
    log_joint(y, &log_weights(p.weights), p.means, cov, &mut out, &mut scratch);
    softmax_in_place(&mut out);
    Ok(out)
}

/// Log mixture density `ln Σ_c w_c N(y; μ_c, Σ)`.
pub fn mixture_log_density(y: &[f64], p: SiteParams<'_>, cov: &SiteCovariance) -> Result<f64> {
    check_site_params(&p, cov, y.len())?;
    let mut out = vec![0.0; p.means.len()];
    let mut scratch = vec![0.0; y.len()];
    log_joint(y, &log_weights(p.weights), p.means, cov, &mut out, &mut scratch);
    Ok(crate::numeric::log_sum_exp(&out))
}

/// Ratio of site j's mixture density to the lead site's at `y`.
///
/// Both sides are evaluated in log space; the tilt for the lead site itself
/// is exactly 1.
pub fn density_ratio(
    y: &[f64],
    site: SiteParams<'_>,
    site_cov: &SiteCovariance,
    lead: SiteParams<'_>,
    lead_cov: &SiteCovariance,
) -> Result<f64> {
    let num = mixture_log_density(y, site, site_cov)?;
    let den = mixture_log_density(y, lead, lead_cov)?;
    let t = (num - den).exp();
    if !t.is_finite() || t <= 0.0 {
        return Err(FedMixError::NumericalOverflow(format!(
            "density ratio exp({num} - {den}) is not a positive finite number"
        )));
    }
    Ok(t)
}

/// E-step over one site: responsibilities and the site's observed-data
/// log-likelihood.
pub(crate) fn e_step(
    site: &SiteDataset,
    p: SiteParams<'_>,
    cov: &SiteCovariance,
) -> (Responsibilities, f64) {
    let s = p.means.len();
    let mut probs = vec![0.0; site.len() * s];
    let mut scratch = vec![0.0; site.dim()];
    let mut loglik = CompensatedSum::default();
    let lw = log_weights(p.weights);
    for (y, row) in site.rows().zip(probs.chunks_exact_mut(s)) {
        log_joint(y, &lw, p.means, cov, row, &mut scratch);
        loglik.add(softmax_in_place(row));
    }
    (
        Responsibilities { classes: s, probs },
        loglik.value(),
    )
}

/// Responsibilities of every observation at a site under θ_j.
pub fn responsibilities(
    site: &SiteDataset,
    p: SiteParams<'_>,
    cov: &SiteCovariance,
) -> Result<Responsibilities> {
    check_site_params(&p, cov, site.dim())?;
    Ok(e_step(site, p, cov).0)
}

/// Observed-data log-likelihood `Σ_j Σ_i ln f_j(y_ij; θ_j)`.
pub fn mixture_log_likelihood(
    datasets: &[SiteDataset],
    params: &ModelParams,
    cov: &Covariance,
) -> Result<f64> {
    if datasets.is_empty() {
        return Err(FedMixError::contract("log-likelihood needs at least one dataset"));
    }
    params.check_compatible(cov, datasets)?;
    let mut total = CompensatedSum::default();
    let mut joint = vec![0.0; params.classes()];
    let mut scratch = vec![0.0; params.dim()];
    for (j, ds) in datasets.iter().enumerate() {
        let lw = log_weights(params.weights(j));
        for y in ds.rows() {
            log_joint(y, &lw, params.means(), cov.site(j), &mut joint, &mut scratch);
            total.add(crate::numeric::log_sum_exp(&joint));
        }
    }
    let value = total.value();
    if !value.is_finite() {
        return Err(FedMixError::NumericalOverflow(
            "log-likelihood is not finite".into(),
        ));
    }
    Ok(value)
}

/// Per-class sums `Σ_i m_i r_ic (y_i − μ_c)` with an optional per-row
/// multiplier `m_i` (the density-ratio tilt). Rows of `resp` align with the
/// rows of `site`.
pub(crate) fn weighted_residual_sums(
    site: &SiteDataset,
    resp: &Responsibilities,
    tilt: Option<&[f64]>,
    means: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let d = site.dim();
    let mut sums = vec![vec![0.0; d]; means.len()];
    for (i, (y, r)) in site.rows().zip(resp.rows()).enumerate() {
        for (c, (acc, m)) in sums.iter_mut().zip(means).enumerate() {
            let w = match tilt {
                Some(t) => t[i] * r[c],
                None => r[c],
            };
            for k in 0..d {
                acc[k] += w * (y[k] - m[k]);
            }
        }
    }
    sums
}

/// ∇_μ of the site's Q function: `(1/n) Σ_i w_ic Σ_j⁻¹ (y_i − μ_c)` stacked
/// over classes, with responsibilities taken at `snapshot` (θ_j^t) and the
/// residuals at `means`.
pub fn local_q_gradient(
    site: &SiteDataset,
    means: &[Vec<f64>],
    snapshot: SiteParams<'_>,
    cov: &SiteCovariance,
) -> Result<Vec<f64>> {
    check_site_params(&snapshot, cov, site.dim())?;
    if means.len() != snapshot.means.len() || means.iter().any(|m| m.len() != site.dim()) {
        return Err(FedMixError::contract("gradient means do not match the snapshot shape"));
    }
    let (resp, _) = e_step(site, snapshot, cov);
    Ok(gradient_from_responsibilities(site, &resp, means, cov))
}

pub(crate) fn gradient_from_responsibilities(
    site: &SiteDataset,
    resp: &Responsibilities,
    means: &[Vec<f64>],
    cov: &SiteCovariance,
) -> Vec<f64> {
    let d = site.dim();
    let scale = 1.0 / site.len() as f64;
    let sums = weighted_residual_sums(site, resp, None, means);
    let mut out = vec![0.0; d * means.len()];
    let mut scaled = vec![0.0; d];
    for (c, sum) in sums.iter().enumerate() {
        for k in 0..d {
            scaled[k] = sum[k] * scale;
        }
        cov.precision_mul(&scaled, &mut out[c * d..(c + 1) * d]);
    }
    out
}

/// The site's Q function `(1/n) Σ_i Σ_c w_ic {ln π_c + ln N(y_i; μ_c, Σ_j)}`
/// evaluated at `params` with responsibilities at `snapshot`.
pub fn local_q_value(
    site: &SiteDataset,
    params: SiteParams<'_>,
    snapshot: SiteParams<'_>,
    cov: &SiteCovariance,
) -> Result<f64> {
    check_site_params(&params, cov, site.dim())?;
    check_site_params(&snapshot, cov, site.dim())?;
    let (resp, _) = e_step(site, snapshot, cov);
    let mut scratch = vec![0.0; site.dim()];
    let mut total = CompensatedSum::default();
    for (y, r) in site.rows().zip(resp.rows()) {
        for (c, (m, w)) in params.means.iter().zip(params.weights).enumerate() {
            total.add(r[c] * (w.ln() + cov.log_density(y, m, &mut scratch)));
        }
    }
    Ok(total.value() / site.len() as f64)
}

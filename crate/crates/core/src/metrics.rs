//! Evaluation quantities: d₂ parameter distances, approximation error,
//! bias/variance/MSE aggregation, the signal-to-noise ratio and the
//! initialization-radius diagnostic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FedMixError, Result};
use crate::model::ModelParams;
use crate::numeric::{l2_distance, l2_norm};

fn check_same_shape(a: &ModelParams, b: &ModelParams) -> Result<()> {
    if a.classes() != b.classes() || a.sites() != b.sites() || a.dim() != b.dim() {
        return Err(FedMixError::contract(format!(
            "shape mismatch: (S={}, K={}, d={}) vs (S={}, K={}, d={})",
            a.classes(),
            a.sites(),
            a.dim(),
            b.classes(),
            b.sites(),
            b.dim()
        )));
    }
    Ok(())
}

/// Permutation aligning `means` to `reference`: component `c` of the result
/// is component `perm[c]` of `means`.
///
/// Two classes use the keep/swap matching rule (keep only when the direct
/// pairing is strictly closer). More classes search all permutations for the
/// smallest summed distance, preferring the identity on ties.
pub fn label_alignment(means: &[Vec<f64>], reference: &[Vec<f64>]) -> Vec<usize> {
    let s = means.len();
    if s == 2 {
        let keep = l2_distance(&means[0], &reference[0]) + l2_distance(&means[1], &reference[1]);
        let swap = l2_distance(&means[0], &reference[1]) + l2_distance(&means[1], &reference[0]);
        return if keep < swap { vec![0, 1] } else { vec![1, 0] };
    }
    let mut best: (f64, Vec<usize>) = (f64::INFINITY, (0..s).collect());
    let mut perm: Vec<usize> = (0..s).collect();
    permutations(&mut perm, 0, &mut |p| {
        let cost: f64 = p
            .iter()
            .enumerate()
            .map(|(c, &src)| l2_distance(&means[src], &reference[c]))
            .sum();
        if cost < best.0 {
            best = (cost, p.to_vec());
        }
    });
    best.1
}

fn permutations(p: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permutations(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// Relabels `theta` to match `reference`.
pub fn align_to(theta: &ModelParams, reference: &ModelParams) -> ModelParams {
    let perm = label_alignment(theta.means(), reference.means());
    if perm.iter().enumerate().all(|(c, &p)| c == p) {
        theta.clone()
    } else if theta.classes() == 2 {
        theta.swapped_labels()
    } else {
        theta.permuted(&perm)
    }
}

/// d₂ without relabeling. The mixing term uses the S − 1 free weights per
/// site, i.e. λ_j for two classes.
pub fn d2_unaligned(theta: &ModelParams, reference: &ModelParams) -> Result<f64> {
    check_same_shape(theta, reference)?;
    let free = theta.classes() - 1;
    let lambda_sq: f64 = theta
        .all_weights()
        .iter()
        .zip(reference.all_weights())
        .map(|(a, b)| {
            a[..free]
                .iter()
                .zip(&b[..free])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum();
    let mean_term: f64 = theta
        .means()
        .iter()
        .zip(reference.means())
        .map(|(a, b)| l2_distance(a, b))
        .sum();
    Ok(lambda_sq.sqrt() + mean_term)
}

/// `d₂(θ, θ̃) = (Σ_j |λ_j − λ̃_j|²)^{1/2} + Σ_c ‖μ_c − μ̃_c‖₂` after aligning
/// the labels of `theta` to `reference`.
pub fn d2_full(theta: &ModelParams, reference: &ModelParams) -> Result<f64> {
    check_same_shape(theta, reference)?;
    d2_unaligned(&align_to(theta, reference), reference)
}

/// `d₂(θ_j, θ̃_j) = |λ_j − λ̃_j| + Σ_c ‖μ_c − μ̃_c‖₂`, labels aligned first.
pub fn d2_site(theta: &ModelParams, reference: &ModelParams, site: usize) -> Result<f64> {
    check_same_shape(theta, reference)?;
    if site >= theta.sites() {
        return Err(FedMixError::contract(format!(
            "site {site} out of range for K = {}",
            theta.sites()
        )));
    }
    let aligned = align_to(theta, reference);
    let free = theta.classes() - 1;
    let lambda: f64 = aligned.weights(site)[..free]
        .iter()
        .zip(&reference.weights(site)[..free])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let means: f64 = aligned
        .means()
        .iter()
        .zip(reference.means())
        .map(|(a, b)| l2_distance(a, b))
        .sum();
    Ok(lambda + means)
}

/// Relative distance `‖μ̃ − μ̂‖₂ / ‖μ̂‖₂` of the stacked mean vectors.
pub fn approximation_error(mu_tilde: &[Vec<f64>], mu_hat: &[Vec<f64>]) -> Result<f64> {
    let a = mu_tilde.concat();
    let b = mu_hat.concat();
    if a.len() != b.len() {
        return Err(FedMixError::DimensionMismatch {
            context: "approximation_error",
            expected: b.len(),
            actual: a.len(),
        });
    }
    let denom = l2_norm(&b);
    if denom == 0.0 {
        return Err(FedMixError::contract("reference means are all zero"));
    }
    Ok(l2_distance(&a, &b) / denom)
}

/// Δ = {(μ₁ − μ₀)ᵀ Σ⁻¹ (μ₁ − μ₀)}^{1/2}.
pub fn snr(mu1: &[f64], mu0: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu0.len() || sigma.nrows() != mu1.len() || sigma.ncols() != mu1.len() {
        return Err(FedMixError::DimensionMismatch {
            context: "snr",
            expected: mu1.len(),
            actual: sigma.nrows(),
        });
    }
    let diff = DVector::from_iterator(mu1.len(), mu1.iter().zip(mu0).map(|(a, b)| a - b));
    let chol = nalgebra::Cholesky::new(sigma.clone())
        .ok_or_else(|| FedMixError::contract("Σ is not positive definite"))?;
    let solved = chol.solve(&diff);
    Ok(diff.dot(&solved).max(0.0).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition1Constants {
    pub c0: f64,
    pub c1: f64,
    pub cw: f64,
}

impl Default for Condition1Constants {
    fn default() -> Self {
        Self {
            c0: 0.1,
            c1: 0.75,
            cw: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition1Report {
    pub snr: f64,
    pub distance: f64,
    /// The four candidate radii whose minimum is r.
    pub terms: [f64; 4],
    pub radius: f64,
    /// rΔ
    pub threshold: f64,
    pub satisfied: bool,
}

/// Checks whether the initial estimate lies within rΔ of the truth, with r
/// the minimum of the four admissible-radius expressions. A diagnostic only.
pub fn condition1_radius_check(
    theta0: &ModelParams,
    theta_star: &ModelParams,
    sigma: &DMatrix<f64>,
    constants: Condition1Constants,
    eigen_bound: f64,
) -> Result<Condition1Report> {
    let Condition1Constants { c0, c1, cw } = constants;
    if !(0.0 < c0 && c0 <= cw && cw < 0.5 && 0.5 < c1 && c1 < 1.0) {
        return Err(FedMixError::contract(format!(
            "constants must satisfy 0 < c0 <= cw < 1/2 < c1 < 1, got c0={c0}, cw={cw}, c1={c1}"
        )));
    }
    let m = eigen_bound;
    if !(m > 0.0 && m.is_finite()) {
        return Err(FedMixError::contract(format!("eigenvalue bound M = {m} must be positive")));
    }
    if theta_star.classes() != 2 {
        return Err(FedMixError::Unsupported(
            "the radius check is defined for two classes".into(),
        ));
    }
    let delta = snr(&theta_star.means()[0], &theta_star.means()[1], sigma)?;
    let distance = d2_full(theta0, theta_star)?;
    let terms = [
        m.powf(1.5) / 4.0,
        (c0 - cw).abs() / delta,
        ((2.0 * c1 - 1.0) / m + 4.0 / m).sqrt() - 2.0 / m.sqrt(),
        (c1 / m + 0.25 * (m + 1.0 / m + 2.0)).sqrt() - 0.5 * (m.sqrt() + 1.0 / m.sqrt()),
    ];
    let radius = terms.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = radius * delta;
    Ok(Condition1Report {
        snr: delta,
        distance,
        terms,
        radius,
        threshold,
        satisfied: distance <= threshold,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Local,
    Average,
    Pooled,
    Distributed,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Local,
        Estimator::Average,
        Estimator::Pooled,
        Estimator::Distributed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Local => "local",
            Estimator::Average => "average",
            Estimator::Pooled => "pooled",
            Estimator::Distributed => "distributed",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = FedMixError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "local" => Ok(Estimator::Local),
            "average" => Ok(Estimator::Average),
            "pooled" => Ok(Estimator::Pooled),
            "distributed" => Ok(Estimator::Distributed),
            other => Err(FedMixError::Unsupported(format!("unknown estimator '{other}'"))),
        }
    }
}

/// One estimator's outcome in one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: Estimator,
    /// μ̂₀₁ − μ₀₁*: first coordinate of the class carrying 1 − λ.
    pub bias: f64,
    /// ‖μ̂ − μ*‖₂² / (2d)
    pub squared_error: f64,
    pub means: Vec<Vec<f64>>,
}

impl EstimateRecord {
    /// Aligns `means` to the truth and computes the tracked quantities.
    pub fn new(estimator: Estimator, means: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Self> {
        if means.len() != truth.len() || means.len() < 2 {
            return Err(FedMixError::contract("estimate and truth class counts differ"));
        }
        let perm = label_alignment(means, truth);
        let aligned: Vec<Vec<f64>> = perm.iter().map(|&c| means[c].clone()).collect();
        let d = truth[0].len();
        let sq: f64 = aligned
            .iter()
            .zip(truth)
            .map(|(a, b)| l2_distance(a, b).powi(2))
            .sum();
        let record = Self {
            estimator,
            bias: aligned[1][0] - truth[1][0],
            squared_error: sq / (2.0 * d as f64),
            means: aligned,
        };
        if !(record.bias.is_finite() && record.squared_error.is_finite()) {
            return Err(FedMixError::NumericalOverflow("non-finite estimate".into()));
        }
        Ok(record)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub replication: usize,
    pub records: Vec<EstimateRecord>,
}

impl ReplicationSummary {
    pub fn get(&self, estimator: Estimator) -> Option<&EstimateRecord> {
        self.records.iter().find(|r| r.estimator == estimator)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub estimator: Estimator,
    pub replications: usize,
    pub bias: f64,
    /// Unbiased sample variance of μ̂₀₁.
    pub variance: f64,
    pub mse: f64,
}

/// Mean bias, variance (divide by R − 1) and mean squared error per estimator.
/// Estimators missing from a replication (failed fits) are skipped for it.
pub fn aggregate(replications: &[ReplicationSummary]) -> Result<Vec<AggregateRow>> {
    if replications.len() < 2 {
        return Err(FedMixError::contract("aggregation needs at least 2 replications"));
    }
    let mut rows = Vec::new();
    for est in Estimator::ALL {
        let records: Vec<&EstimateRecord> =
            replications.iter().filter_map(|r| r.get(est)).collect();
        if records.is_empty() {
            continue;
        }
        let r = records.len() as f64;
        let bias = records.iter().map(|x| x.bias).sum::<f64>() / r;
        let variance = if records.len() > 1 {
            records.iter().map(|x| (x.bias - bias).powi(2)).sum::<f64>() / (r - 1.0)
        } else {
            f64::NAN
        };
        let mse = records.iter().map(|x| x.squared_error).sum::<f64>() / r;
        rows.push(AggregateRow {
            estimator: est,
            replications: records.len(),
            bias,
            variance,
            mse,
        });
    }
    Ok(rows)
}

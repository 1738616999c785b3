#![allow(dead_code)]

use fedmix::federation::compute_report;
use fedmix::{Covariance, GradientReport, ModelParams, SiteDataset};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub data: Vec<SiteDataset>,
    pub cov: Covariance,
    pub theta: ModelParams,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random symmetric positive definite matrix with eigenvalues roughly in
/// [0.5, 3].
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng) * 0.5);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * rng.random_range(0.5..1.5)
}

/// Two-class data at each site drawn from `theta` with the given covariances.
pub fn draw_sites(rng: &mut ChaCha8Rng, theta: &ModelParams, cov: &Covariance, sizes: &[usize]) -> Vec<SiteDataset> {
    let d = theta.dim();
    sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let l = cov.site(j).sigma().clone().cholesky().unwrap().l();
            let mut values = Vec::with_capacity(n * d);
            for _ in 0..n {
                let c = if rng.random_bool(theta.lambda(j)) { 0 } else { 1 };
                let z: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
                for a in 0..d {
                    let mut v = theta.means()[c][a];
                    for b in 0..=a {
                        v += l[(a, b)] * z[b];
                    }
                    values.push(v);
                }
            }
            SiteDataset::new(j, d, values).unwrap()
        })
        .collect()
}

/// A random instance with K ≤ max_k sites, d ≤ max_d, n ≤ max_n per site and
/// per-site covariances; `theta` is a perturbed version of the truth.
pub fn random_instance(seed: u64, max_k: usize, max_d: usize, max_n: usize) -> Instance {
    let mut r = rng(seed);
    let k = r.random_range(1..=max_k);
    let d = r.random_range(1..=max_d);
    let mu1: Vec<f64> = (0..d).map(|_| normal(&mut r) + 1.5).collect();
    let mu0: Vec<f64> = (0..d).map(|_| normal(&mut r) - 1.5).collect();
    let lambdas: Vec<f64> = (0..k).map(|_| r.random_range(0.2..0.8)).collect();
    let truth = ModelParams::two_class(mu1, mu0, &lambdas).unwrap();
    let shared = r.random_bool(0.3);
    let cov = if shared {
        Covariance::shared(random_spd(&mut r, d), k).unwrap()
    } else {
        Covariance::per_site((0..k).map(|_| random_spd(&mut r, d)).collect()).unwrap()
    };
    let sizes: Vec<usize> = (0..k).map(|_| r.random_range(5.max(max_n / 4)..=max_n)).collect();
    let data = draw_sites(&mut r, &truth, &cov, &sizes);
    // Current iterate: truth plus noise, fresh weights.
    let means: Vec<Vec<f64>> = truth
        .means()
        .iter()
        .map(|m| m.iter().map(|v| v + 0.5 * normal(&mut r)).collect())
        .collect();
    let weights: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let l = r.random_range(0.1..0.9);
            vec![l, 1.0 - l]
        })
        .collect();
    let theta = ModelParams::new(means, weights).unwrap();
    Instance { data, cov, theta }
}

/// Site reports computed in-process, bypassing the transport.
pub fn direct_reports(inst: &Instance, round: u64) -> Vec<GradientReport> {
    inst.data
        .iter()
        .enumerate()
        .map(|(j, ds)| {
            let (weights, grad_mu) = compute_report(ds, inst.theta.site(j), inst.cov.site(j));
            GradientReport { site_id: j, round, weights, grad_mu }
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub mod checks;
pub mod oracles;
pub mod privacy;

pub fn site_rows(ds: &SiteDataset) -> Vec<Vec<f64>> {
    ds.rows().map(|r| r.to_vec()).collect()
}

pub fn all_rows(inst: &Instance) -> Vec<Vec<Vec<f64>>> {
    inst.data.iter().map(site_rows).collect()
}

pub fn sigmas(inst: &Instance) -> Vec<DMatrix<f64>> {
    (0..inst.cov.sites()).map(|j| inst.cov.site(j).sigma().clone()).collect()
}

/// A converged-looking local fit with the given means and equal weights.
pub fn hand_fit(site_id: usize, observations: usize, means: Vec<Vec<f64>>) -> fedmix::baselines::LocalFit {
    use fedmix::pooled::{FitTrace, StopReason, TraceEntry};
    let s = means.len();
    let params = ModelParams::new(means, vec![vec![1.0 / s as f64; s]]).unwrap();
    fedmix::baselines::LocalFit {
        site_id,
        observations,
        trace: FitTrace {
            entries: vec![TraceEntry {
                iteration: 0,
                params: params.clone(),
                log_likelihood: None,
                step: None,
                traffic: None,
            }],
            stop: StopReason::Converged,
        },
        params,
    }
}

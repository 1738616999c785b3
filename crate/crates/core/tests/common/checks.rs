//! Library-versus-oracle comparisons shared by the integration tests and
//! the acceptance runner. Each returns the worst relative discrepancy.

use super::oracles;
use super::*;
use fedmix::baselines::{average_estimator, kmeans_init};
use fedmix::model::local_q_value;
use fedmix::{build_surrogate, d2_unaligned, local_q_gradient, pooled_em_step, RoundInputs};
use nalgebra::DVector;

/// ‖a − b‖∞ / ‖b‖∞.
pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn pooled_step_error(inst: &Instance) -> f64 {
    let next = pooled_em_step(&inst.data, &inst.theta, &inst.cov).unwrap();
    let m = inst.theta.means();
    let (m1, m0, lam) = oracles::pooled_step(&all_rows(inst), &sigmas(inst), &m[0], &m[1], &inst.theta.lambdas());
    rel_inf(&next.means()[0], &m1)
        .max(rel_inf(&next.means()[1], &m0))
        .max(rel_inf(&next.lambdas(), &lam))
}

pub fn surrogate_error(inst: &Instance) -> f64 {
    let reports = direct_reports(inst, 0);
    let sq = build_surrogate(
        &RoundInputs { lead: &inst.data[0], theta: &inst.theta, reports: &reports, round: 0 },
        &inst.cov,
    )
    .unwrap();
    let m = inst.theta.means();
    let o = oracles::surrogate(&all_rows(inst), &sigmas(inst), &m[0], &m[1], &inst.theta.lambdas());
    let a = sq.precision_mass();
    let b = sq.moment();
    let mut worst = 0.0f64;
    for c in 0..2 {
        worst = worst.max(rel_inf(a[c].as_slice(), o.a[c].as_slice()));
        worst = worst.max(rel_inf(b[c].as_slice(), o.b[c].as_slice()));
    }
    let corr: Vec<f64> = o.correction.iter().flat_map(|v| v.iter().copied()).collect();
    // The correction is a difference of nearly equal terms; compare it on
    // the scale of the gradients it is built from.
    let scale = sq.target_gradient().iter().chain(sq.lead_gradient()).fold(1.0f64, |m, v| m.max(v.abs()));
    let diff = sq.correction().iter().zip(&corr).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    worst.max(diff / scale)
}

/// Central-difference check of the local Q gradient at every site; returns
/// the worst relative error.
pub fn finite_difference_error(inst: &Instance, h: f64) -> f64 {
    let mut worst = 0.0f64;
    let means = inst.theta.means().to_vec();
    let d = inst.theta.dim();
    for (j, ds) in inst.data.iter().enumerate() {
        let snapshot = inst.theta.site(j);
        let cov = inst.cov.site(j);
        let g = local_q_gradient(ds, &means, snapshot, cov).unwrap();
        let mut fd = vec![0.0; g.len()];
        for c in 0..2 {
            for k in 0..d {
                let mut plus = means.clone();
                let mut minus = means.clone();
                plus[c][k] += h;
                minus[c][k] -= h;
                let p = inst.theta.with_means(plus).unwrap();
                let q = inst.theta.with_means(minus).unwrap();
                let vp = local_q_value(ds, p.site(j), snapshot, cov).unwrap();
                let vm = local_q_value(ds, q.site(j), snapshot, cov).unwrap();
                fd[c * d + k] = (vp - vm) / (2.0 * h);
            }
        }
        let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let diff = g.iter().zip(&fd).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        worst = worst.max(diff / scale);
    }
    worst
}

/// Twelve points in two loose blobs; k-means against exhaustive search.
pub fn kmeans_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            let centre = if i < 6 { 0.0 } else { 2.5 };
            vec![centre + normal(&mut r), centre + 0.5 * normal(&mut r)]
        })
        .collect();
    let ds = SiteDataset::from_rows(0, &rows).unwrap();
    let fit = kmeans_init(&ds, 2, 10, seed).unwrap();
    let (cents, wcss) = oracles::exhaustive_two_means(&rows);
    let (a, b) = if rel_inf(&fit.centroids[0], &cents[0]) < rel_inf(&fit.centroids[0], &cents[1]) {
        (&cents[0], &cents[1])
    } else {
        (&cents[1], &cents[0])
    };
    rel_inf(&fit.centroids[0], a)
        .max(rel_inf(&fit.centroids[1], b))
        .max((fit.wcss - wcss).abs() / wcss)
}

/// Three hand-built local fits, one of them label-swapped.
pub fn average_error() -> f64 {
    let fits = [
        [vec![1.0, 2.0], vec![-1.0, 0.5]],
        [vec![-0.8, 0.4], vec![1.2, 2.1]],
        [vec![0.9, 1.7], vec![-1.1, 0.6]],
    ];
    let sizes = [100, 250, 150];
    let weights = vec![1.0 / 3.0; 3];
    let local: Vec<_> = fits
        .iter()
        .enumerate()
        .map(|(j, f)| hand_fit(j, sizes[j], f.to_vec()))
        .collect();
    let got = average_estimator(&local, &weights).unwrap();
    let want = oracles::average(&fits, &weights);
    rel_inf(&got[0], &want[0]).max(rel_inf(&got[1], &want[1]))
}

pub fn d2_error(inst: &Instance) -> f64 {
    let mut r = rng(inst.data.len() as u64 * 31 + inst.theta.dim() as u64);
    let means: Vec<Vec<f64>> = inst
        .theta
        .means()
        .iter()
        .map(|m| m.iter().map(|v| v + 0.3 * normal(&mut r)).collect())
        .collect();
    let lambdas: Vec<f64> = inst.theta.lambdas().iter().map(|l| (l + 0.1 * normal(&mut r)).clamp(0.05, 0.95)).collect();
    let other = ModelParams::two_class(means[0].clone(), means[1].clone(), &lambdas).unwrap();
    let got = d2_unaligned(&inst.theta, &other).unwrap();
    let want = oracles::d2(inst.theta.means(), &inst.theta.lambdas(), other.means(), &lambdas);
    (got - want).abs() / want
}

/// Hessian of the surrogate against `-Σ_j Ω_j Σ_i t w / (Kn)` assembled by
/// the oracle.
pub fn hessian_error(inst: &Instance) -> f64 {
    let reports = direct_reports(inst, 0);
    let sq = build_surrogate(
        &RoundInputs { lead: &inst.data[0], theta: &inst.theta, reports: &reports, round: 0 },
        &inst.cov,
    )
    .unwrap();
    let m = inst.theta.means();
    let o = oracles::surrogate(&all_rows(inst), &sigmas(inst), &m[0], &m[1], &inst.theta.lambdas());
    let d = inst.theta.dim();
    let mut want = nalgebra::DMatrix::zeros(2 * d, 2 * d);
    for c in 0..2 {
        want.view_mut((c * d, c * d), (d, d)).copy_from(&(-&o.a[c]));
    }
    rel_inf(sq.hessian().as_slice(), want.as_slice())
}

/// ‖∇Q̃(μ^t) − mean_j ∇Q_j(μ^t)‖∞ with the pooled side recomputed directly.
pub fn gradient_match(inst: &Instance) -> f64 {
    let reports = direct_reports(inst, 0);
    let sq = build_surrogate(
        &RoundInputs { lead: &inst.data[0], theta: &inst.theta, reports: &reports, round: 0 },
        &inst.cov,
    )
    .unwrap();
    let k = inst.data.len() as f64;
    let mut pooled = DVector::zeros(2 * inst.theta.dim());
    for (j, ds) in inst.data.iter().enumerate() {
        let g = local_q_gradient(ds, inst.theta.means(), inst.theta.site(j), inst.cov.site(j)).unwrap();
        pooled += DVector::from_vec(g) / k;
    }
    let g = sq.gradient(inst.theta.means()).unwrap();
    max_abs_diff(&g, pooled.as_slice())
}

/// Scalar instance from hand-listed data, one variance per site.
pub fn scalar_fixture(sites: &[&[f64]], variances: &[f64], mu1: f64, mu0: f64, lambdas: &[f64]) -> Instance {
    let data = sites
        .iter()
        .enumerate()
        .map(|(j, ys)| SiteDataset::new(j, 1, ys.to_vec()).unwrap())
        .collect();
    let cov = Covariance::per_site(variances.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect()).unwrap();
    let theta = ModelParams::two_class(vec![mu1], vec![mu0], lambdas).unwrap();
    Instance { data, cov, theta }
}

/// The d = 1, K = 2, n = 3 pooled-step fixture.
pub fn pooled_fixture() -> Instance {
    scalar_fixture(&[&[0.3, 2.1, -0.4], &[1.7, -1.2, 0.9]], &[1.0, 2.0], 1.5, -0.5, &[0.4, 0.65])
}

/// The d = 1, K = 2, n = 2 surrogate fixture.
pub fn surrogate_fixture() -> Instance {
    scalar_fixture(&[&[0.8, -1.1], &[2.0, 0.1]], &[1.0, 2.0], 1.0, -1.0, &[0.3, 0.7])
}

/// Hand-built K = 2, d = 2 pair for d₂, against the direct formula for the
/// full and per-site distances.
pub fn d2_fixture_error() -> f64 {
    let a = ModelParams::two_class(vec![1.0, 2.0], vec![-0.5, 0.25], &[0.3, 0.6]).unwrap();
    let b = ModelParams::two_class(vec![1.5, 1.0], vec![0.0, 0.0], &[0.45, 0.4]).unwrap();
    let full = oracles::d2(a.means(), &a.lambdas(), b.means(), &b.lambdas());
    let mut worst = (d2_unaligned(&a, &b).unwrap() - full).abs() / full;
    worst = worst.max((fedmix::d2_full(&a, &b).unwrap() - full).abs() / full);
    for j in 0..2 {
        let site = oracles::d2(a.means(), &[a.lambda(j)], b.means(), &[b.lambda(j)]);
        worst = worst.max((fedmix::metrics::d2_site(&a, &b, j).unwrap() - site).abs() / site);
    }
    worst
}

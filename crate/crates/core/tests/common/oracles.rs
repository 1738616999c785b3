//! Brute-force reference computations written independently of the
//! library: explicit densities, explicit inverses, no log-space tricks.

use nalgebra::{DMatrix, DVector};

pub fn pdf(y: &[f64], mean: &[f64], sigma: &DMatrix<f64>) -> f64 {
    let d = y.len();
    let r = DVector::from_iterator(d, y.iter().zip(mean).map(|(a, b)| a - b));
    let inv = sigma.clone().try_inverse().unwrap();
    let q = (r.transpose() * inv * &r)[(0, 0)];
    (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0) * sigma.determinant().powf(-0.5) * (-0.5 * q).exp()
}

/// Posterior probability of the first class at one site.
pub fn first_class_posterior(y: &[f64], mu1: &[f64], mu0: &[f64], lambda: f64, sigma: &DMatrix<f64>) -> f64 {
    let a = lambda * pdf(y, mu1, sigma);
    let b = (1.0 - lambda) * pdf(y, mu0, sigma);
    a / (a + b)
}

/// One pooled EM step: returns (μ₁, μ₀, λ per site).
pub fn pooled_step(
    sites: &[Vec<Vec<f64>>],
    sigmas: &[DMatrix<f64>],
    mu1: &[f64],
    mu0: &[f64],
    lambdas: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = mu1.len();
    let mut a1 = DMatrix::zeros(d, d);
    let mut a0 = DMatrix::zeros(d, d);
    let mut b1 = DVector::zeros(d);
    let mut b0 = DVector::zeros(d);
    let mut new_lambdas = Vec::new();
    for (j, ys) in sites.iter().enumerate() {
        let omega = sigmas[j].clone().try_inverse().unwrap();
        let mut lam = 0.0;
        for y in ys {
            let g = first_class_posterior(y, mu1, mu0, lambdas[j], &sigmas[j]);
            lam += g;
            let yv = DVector::from_column_slice(y);
            a1 += &omega * g;
            a0 += &omega * (1.0 - g);
            b1 += &omega * &yv * g;
            b0 += &omega * &yv * (1.0 - g);
        }
        new_lambdas.push(lam / ys.len() as f64);
    }
    let m1 = a1.try_inverse().unwrap() * b1;
    let m0 = a0.try_inverse().unwrap() * b0;
    (m1.as_slice().to_vec(), m0.as_slice().to_vec(), new_lambdas)
}

/// Coefficients of the corrected surrogate for two classes, evaluated term
/// by term: per class (A_c, b_c, g_c) with the normalization 1/(K n).
pub struct SurrogateCoefficients {
    pub a: [DMatrix<f64>; 2],
    pub b: [DVector<f64>; 2],
    pub correction: [DVector<f64>; 2],
}

pub fn surrogate(
    sites: &[Vec<Vec<f64>>],
    sigmas: &[DMatrix<f64>],
    mu1: &[f64],
    mu0: &[f64],
    lambdas: &[f64],
) -> SurrogateCoefficients {
    let d = mu1.len();
    let k = sites.len();
    let lead = &sites[0];
    let n = lead.len() as f64;
    let norm = 1.0 / (k as f64 * n);
    let mix = |y: &[f64], j: usize| {
        lambdas[j] * pdf(y, mu1, &sigmas[j]) + (1.0 - lambdas[j]) * pdf(y, mu0, &sigmas[j])
    };
    let mut a = [DMatrix::zeros(d, d), DMatrix::zeros(d, d)];
    let mut b = [DVector::zeros(d), DVector::zeros(d)];
    let mut tilted_grad = [DVector::zeros(d), DVector::zeros(d)];
    let mut pooled_grad = [DVector::zeros(d), DVector::zeros(d)];
    let mus = [DVector::from_column_slice(mu1), DVector::from_column_slice(mu0)];
    for j in 0..k {
        let omega = sigmas[j].clone().try_inverse().unwrap();
        for y in lead {
            let t = mix(y, j) / mix(y, 0);
            let g = first_class_posterior(y, mu1, mu0, lambdas[j], &sigmas[j]);
            let yv = DVector::from_column_slice(y);
            for (c, w) in [g, 1.0 - g].into_iter().enumerate() {
                a[c] += &omega * (t * w * norm);
                b[c] += &omega * &yv * (t * w * norm);
                tilted_grad[c] += &omega * (&yv - &mus[c]) * (t * w * norm);
            }
        }
        let nj = sites[j].len() as f64;
        for y in &sites[j] {
            let g = first_class_posterior(y, mu1, mu0, lambdas[j], &sigmas[j]);
            let yv = DVector::from_column_slice(y);
            for (c, w) in [g, 1.0 - g].into_iter().enumerate() {
                pooled_grad[c] += &omega * (&yv - &mus[c]) * (w / (nj * k as f64));
            }
        }
    }
    SurrogateCoefficients {
        a,
        b,
        correction: [&pooled_grad[0] - &tilted_grad[0], &pooled_grad[1] - &tilted_grad[1]],
    }
}

/// Best two-cluster partition by enumerating every assignment.
pub fn exhaustive_two_means(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = rows.len();
    let d = rows[0].len();
    let mut best = (Vec::new(), f64::INFINITY);
    for mask in 1u32..(1 << n) - 1 {
        let mut sums = [vec![0.0; d], vec![0.0; d]];
        let mut counts = [0.0; 2];
        for (i, y) in rows.iter().enumerate() {
            let c = ((mask >> i) & 1) as usize;
            counts[c] += 1.0;
            for k in 0..d {
                sums[c][k] += y[k];
            }
        }
        let cents: Vec<Vec<f64>> = (0..2).map(|c| sums[c].iter().map(|s| s / counts[c]).collect()).collect();
        let wcss: f64 = rows
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let c = ((mask >> i) & 1) as usize;
                y.iter().zip(&cents[c]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum();
        if wcss < best.1 {
            best = (cents, wcss);
        }
    }
    best
}

fn norm2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Anchor matching then weighted averaging of two-class local means.
pub fn average(fits: &[[Vec<f64>; 2]], weights: &[f64]) -> [Vec<f64>; 2] {
    let d = fits[0][0].len();
    let anchor = &fits[0];
    let mut out = [vec![0.0; d], vec![0.0; d]];
    for (f, w) in fits.iter().zip(weights) {
        let keep_cost = norm2(&f[0], &anchor[0]) + norm2(&f[1], &anchor[1]);
        let swap_cost = norm2(&f[0], &anchor[1]) + norm2(&f[1], &anchor[0]);
        let (m1, m0) = if keep_cost < swap_cost { (&f[0], &f[1]) } else { (&f[1], &f[0]) };
        for k in 0..d {
            out[0][k] += w * m1[k];
            out[1][k] += w * m0[k];
        }
    }
    out
}

/// d₂ without relabeling: sqrt(Σ_j Δλ_j²) + Σ_c ‖Δμ_c‖.
pub fn d2(mu_a: &[Vec<f64>], lam_a: &[f64], mu_b: &[Vec<f64>], lam_b: &[f64]) -> f64 {
    let lam: f64 = lam_a.iter().zip(lam_b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    lam + mu_a.iter().zip(mu_b).map(|(a, b)| norm2(a, b)).sum::<f64>()
}

//! Distributed EM: the lead site builds a density-ratio tilted surrogate of
//! the pooled Q function from its own data and the sites' gradients, then
//! maximizes it in closed form.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{FedMixError, Result};
use crate::federation::{Federation, GradientReport, MeanBroadcast};
use crate::metrics::d2_unaligned;
use crate::model::{
    clamp_weights, log_weights, weighted_residual_sums, Covariance, ModelParams, Responsibilities,
    SiteCovariance, SiteDataset, SiteParams,
};
use crate::numeric::softmax_in_place;
use crate::pooled::{EmConfig, FitTrace, RoundTraffic, StopReason, TraceEntry};

/// Everything the lead site holds when it assembles round `round`.
#[derive(Clone, Copy, Debug)]
pub struct RoundInputs<'a> {
    pub lead: &'a SiteDataset,
    pub theta: &'a ModelParams,
    pub reports: &'a [GradientReport],
    pub round: u64,
}

/// The corrected surrogate
/// `Q̃(μ) = Q̌(μ) + ⟨g, μ⟩` with `g = ∇Q_μ(μ^t) − ∇Q̌(μ^t)`.
///
/// Q̌ is quadratic in each class mean; with `m = Kn` it is
/// `Σ_c (bᵀμ_c − ½ μ_cᵀ A_c μ_c) / m` up to a constant, where
/// `A_c = Σ_j Ω_j Σ_i t_ij w_ijc` and `b_c = Σ_j Ω_j Σ_i t_ij w_ijc y_i`.
#[derive(Clone, Debug)]
pub struct SurrogateQ {
    anchor: Vec<Vec<f64>>,
    precision_mass: Vec<DMatrix<f64>>,
    moment: Vec<DVector<f64>>,
    tilted_mass: Vec<f64>,
    /// Kn.
    normalizer: f64,
    target_gradient: Vec<f64>,
    lead_gradient: Vec<f64>,
    correction: Vec<f64>,
}

impl SurrogateQ {
    pub fn classes(&self) -> usize {
        self.anchor.len()
    }

    pub fn dim(&self) -> usize {
        self.anchor[0].len()
    }

    /// μ^t.
    pub fn anchor(&self) -> &[Vec<f64>] {
        &self.anchor
    }

    /// `A_c / Kn` for each class.
    pub fn precision_mass(&self) -> Vec<DMatrix<f64>> {
        self.precision_mass.iter().map(|a| a / self.normalizer).collect()
    }

    /// `b_c / Kn` for each class.
    pub fn moment(&self) -> Vec<DVector<f64>> {
        self.moment.iter().map(|b| b / self.normalizer).collect()
    }

    /// `Σ_j Σ_i t_ij w_ijc / Kn` for each class.
    pub fn tilted_mass(&self) -> Vec<f64> {
        self.tilted_mass.iter().map(|m| m / self.normalizer).collect()
    }

    /// ∇Q_μ(μ^t), the mean of the reported gradients.
    pub fn target_gradient(&self) -> &[f64] {
        &self.target_gradient
    }

    /// ∇Q̌(μ^t) from lead-site data.
    pub fn lead_gradient(&self) -> &[f64] {
        &self.lead_gradient
    }

    pub fn correction(&self) -> &[f64] {
        &self.correction
    }

    fn check_means(&self, means: &[Vec<f64>]) -> Result<()> {
        if means.len() != self.classes() || means.iter().any(|m| m.len() != self.dim()) {
            return Err(FedMixError::contract("means do not match the surrogate shape"));
        }
        Ok(())
    }

    /// ∇Q̌ at `means`, stacked.
    pub fn tilted_gradient(&self, means: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_means(means)?;
        let d = self.dim();
        let mut out = Vec::with_capacity(self.classes() * d);
        for (c, m) in means.iter().enumerate() {
            let am = &self.precision_mass[c] * DVector::from_column_slice(m);
            out.extend((0..d).map(|k| (self.moment[c][k] - am[k]) / self.normalizer));
        }
        Ok(out)
    }

    /// ∇Q̃ at `means`, stacked.
    pub fn gradient(&self, means: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = self.tilted_gradient(means)?;
        g.iter_mut().zip(&self.correction).for_each(|(a, b)| *a += b);
        Ok(g)
    }

    /// Block-diagonal Hessian of Q̃ (equal to that of Q̌), `S·d × S·d`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let d = self.dim();
        let s = self.classes();
        let mut h = DMatrix::zeros(s * d, s * d);
        for (c, a) in self.precision_mass.iter().enumerate() {
            h.view_mut((c * d, c * d), (d, d)).copy_from(&(-a / self.normalizer));
        }
        h
    }

    /// Q̌ at `means` up to an additive constant.
    pub fn tilted_value(&self, means: &[Vec<f64>]) -> Result<f64> {
        self.check_means(means)?;
        let mut total = 0.0;
        for (c, m) in means.iter().enumerate() {
            let m = DVector::from_column_slice(m);
            total += self.moment[c].dot(&m) - 0.5 * m.dot(&(&self.precision_mass[c] * &m));
        }
        Ok(total / self.normalizer)
    }

    /// Q̃ at `means` up to an additive constant.
    pub fn value(&self, means: &[Vec<f64>]) -> Result<f64> {
        let linear: f64 = means
            .iter()
            .flatten()
            .zip(&self.correction)
            .map(|(m, g)| m * g)
            .sum();
        Ok(self.tilted_value(means)? + linear)
    }
}

fn validate_reports(inputs: &RoundInputs<'_>) -> Result<()> {
    let k = inputs.theta.sites();
    let s = inputs.theta.classes();
    let d = inputs.theta.dim();
    let incomplete = |reason: String| FedMixError::IncompleteRound {
        round: inputs.round,
        reason,
    };
    let mut seen = vec![false; k];
    for r in inputs.reports {
        if r.site_id >= k {
            return Err(incomplete(format!("report from unknown site {}", r.site_id)));
        }
        if std::mem::replace(&mut seen[r.site_id], true) {
            return Err(incomplete(format!("duplicate report from site {}", r.site_id)));
        }
        if r.round != inputs.round {
            return Err(incomplete(format!(
                "site {} reported for round {}",
                r.site_id, r.round
            )));
        }
        if r.grad_mu.len() != s * d || r.weights.len() != s {
            return Err(incomplete(format!("site {} report has the wrong shape", r.site_id)));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(incomplete(format!("missing report from site {missing}")));
    }
    Ok(())
}

/// Per-observation `ln N(y_i; μ_c, Σ)` table for one covariance.
fn log_density_table(lead: &SiteDataset, means: &[Vec<f64>], cov: &SiteCovariance) -> Vec<f64> {
    let mut scratch = vec![0.0; lead.dim()];
    let mut out = Vec::with_capacity(lead.len() * means.len());
    for y in lead.rows() {
        for m in means {
            out.push(cov.log_density(y, m, &mut scratch));
        }
    }
    out
}

/// Assembles Q̃ for round t from lead-site data and the sites' reports.
pub fn build_surrogate(inputs: &RoundInputs<'_>, cov: &Covariance) -> Result<SurrogateQ> {
    let theta = inputs.theta;
    let lead = inputs.lead;
    theta.check_lead(cov, std::slice::from_ref(lead))?;
    if lead.is_empty() {
        return Err(FedMixError::contract("lead site has no observations"));
    }
    validate_reports(inputs)?;

    let k = theta.sites();
    let s = theta.classes();
    let d = theta.dim();
    let n = lead.len();
    let means = theta.means();
    let scale = 1.0 / (k as f64 * n as f64);

    // ln N tables are shared between sites with the same covariance.
    let mut tables: Vec<(Arc<SiteCovariance>, Vec<f64>)> = Vec::new();
    let mut table_for = |c: &Arc<SiteCovariance>| -> usize {
        if let Some(i) = tables.iter().position(|(t, _)| Arc::ptr_eq(t, c)) {
            return i;
        }
        tables.push((Arc::clone(c), log_density_table(lead, means, c)));
        tables.len() - 1
    };
    let lead_table = table_for(cov.site(0));
    let site_tables: Vec<usize> = (0..k).map(|j| table_for(cov.site(j))).collect();

    // Lead mixture log-density (tilt denominator).
    let lead_weights = log_weights(theta.weights(0));
    let mut joint = vec![0.0; s];
    let lead_log_mix: Vec<f64> = tables[lead_table]
        .1
        .chunks_exact(s)
        .map(|row| {
            for c in 0..s {
                joint[c] = lead_weights[c] + row[c];
            }
            softmax_in_place(&mut joint)
        })
        .collect();

    let mut precision_mass = vec![DMatrix::zeros(d, d); s];
    let mut moment = vec![DVector::zeros(d); s];
    let mut tilted_mass = vec![0.0; s];
    let mut lead_gradient = vec![0.0; s * d];
    let mut omega_v = vec![0.0; d];
    let mut scaled = vec![0.0; d];

    for j in 0..k {
        let site_cov = cov.site(j);
        let w = log_weights(theta.weights(j));
        let table = &tables[site_tables[j]].1;
        let mut probs = vec![0.0; n * s];
        let mut tilt = vec![0.0; n];
        for (i, (row, out)) in table.chunks_exact(s).zip(probs.chunks_exact_mut(s)).enumerate() {
            for c in 0..s {
                out[c] = w[c] + row[c];
            }
            let log_mix = softmax_in_place(out);
            let t = (log_mix - lead_log_mix[i]).exp();
            if !t.is_finite() || t <= 0.0 {
                return Err(FedMixError::NumericalOverflow(format!(
                    "tilt for site {j} at lead observation {i} is {t}"
                )));
            }
            tilt[i] = t;
        }
        let resp = Responsibilities::from_probs(s, probs);

        let mut class_mass = vec![0.0; s];
        let mut weighted_sum = vec![vec![0.0; d]; s];
        for ((y, r), t) in lead.rows().zip(resp.rows()).zip(&tilt) {
            for c in 0..s {
                let tw = t * r[c];
                class_mass[c] += tw;
                for kk in 0..d {
                    weighted_sum[c][kk] += tw * y[kk];
                }
            }
        }
        let residuals = weighted_residual_sums(lead, &resp, Some(&tilt), means);
        let omega = site_cov.precision();
        for c in 0..s {
            precision_mass[c] += omega * class_mass[c];
            site_cov.precision_mul(&weighted_sum[c], &mut omega_v);
            for kk in 0..d {
                moment[c][kk] += omega_v[kk];
            }
            tilted_mass[c] += class_mass[c];
            for kk in 0..d {
                scaled[kk] = residuals[c][kk] * scale;
            }
            site_cov.precision_mul(&scaled, &mut omega_v);
            for kk in 0..d {
                lead_gradient[c * d + kk] += omega_v[kk];
            }
        }
    }

    let mut reports: Vec<&GradientReport> = inputs.reports.iter().collect();
    reports.sort_by_key(|r| r.site_id);
    let mut target_gradient = vec![0.0; s * d];
    for r in &reports {
        for (a, g) in target_gradient.iter_mut().zip(&r.grad_mu) {
            *a += g;
        }
    }
    target_gradient.iter_mut().for_each(|a| *a /= k as f64);
    let correction = target_gradient
        .iter()
        .zip(&lead_gradient)
        .map(|(a, b)| a - b)
        .collect();

    Ok(SurrogateQ {
        anchor: means.to_vec(),
        precision_mass,
        moment,
        tilted_mass,
        normalizer: k as f64 * n as f64,
        target_gradient,
        lead_gradient,
        correction,
    })
}

/// The unique maximizer of Q̃: per class `μ_c = A_c⁻¹ (b_c + Kn·g_c)`.
pub fn maximize_surrogate(sq: &SurrogateQ) -> Result<Vec<Vec<f64>>> {
    let d = sq.dim();
    (0..sq.classes())
        .map(|c| {
            let chol = nalgebra::Cholesky::new(sq.precision_mass[c].clone())
                .ok_or(FedMixError::DegenerateTilt { class: c })?;
            let rhs = DVector::from_iterator(
                d,
                (0..d).map(|k| sq.moment[c][k] + sq.normalizer * sq.correction[c * d + k]),
            );
            let mu = chol.solve(&rhs);
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(FedMixError::DegenerateTilt { class: c });
            }
            Ok(mu.as_slice().to_vec())
        })
        .collect()
}

/// Mean responsibility at θ_j^t, clamped away from 0 and 1.
pub fn update_lambda(
    site: &SiteDataset,
    theta_j: SiteParams<'_>,
    cov: &SiteCovariance,
) -> Result<Vec<f64>> {
    let resp = crate::model::responsibilities(site, theta_j, cov)?;
    let mut w = resp.class_means();
    clamp_weights(&mut w);
    Ok(w)
}

/// Initial parameters from initial means: each site's weights are the mean
/// responsibility at (μ⁰, uniform weights). Each site can evaluate its own
/// entry locally.
pub fn plug_in_init(
    datasets: &[SiteDataset],
    means: Vec<Vec<f64>>,
    cov: &Covariance,
) -> Result<ModelParams> {
    let s = means.len();
    let uniform = vec![1.0 / s as f64; s];
    if datasets.len() != cov.sites() {
        return Err(FedMixError::DimensionMismatch {
            context: "datasets vs covariances",
            expected: cov.sites(),
            actual: datasets.len(),
        });
    }
    let weights = datasets
        .iter()
        .enumerate()
        .map(|(j, ds)| {
            update_lambda(
                ds,
                SiteParams {
                    weights: &uniform,
                    means: &means,
                },
                cov.site(j),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::new(means, weights)
}

fn federation_error(round: u64) -> impl Fn(FedMixError) -> FedMixError {
    move |e| FedMixError::Federation {
        round,
        source: Box::new(e),
    }
}

/// Initial parameters negotiated over the transport: sites start from
/// `means` with uniform weights, and one collection round returns each
/// site's plug-in weights. Only the weights of that round are used.
pub fn federated_init(federation: &mut Federation, means: Vec<Vec<f64>>) -> Result<ModelParams> {
    let s = means.len();
    if s < 2 {
        return Err(FedMixError::contract("need at least two classes"));
    }
    let uniform = ModelParams::new(means.clone(), vec![vec![1.0 / s as f64; s]; federation.sites()])?;
    let round = federation.next_round();
    federation.prime(&uniform).map_err(federation_error(round))?;
    let reports = federation.round_collect(round).map_err(federation_error(round))?;
    ModelParams::new(means, reports.into_iter().map(|r| r.weights).collect())
}

/// Runs the distributed EM rounds over `federation` starting at `init`.
///
/// Each round every site reports its next weights and ∇Q_j at θ_j^t; the
/// lead builds and maximizes Q̃ and broadcasts μ^{t+1}. Stops once d₂
/// between successive iterates drops below the tolerance. Round numbers
/// continue from the federation's [`next_round`](Federation::next_round).
pub fn run_distributed_em(
    federation: &mut Federation,
    init: &ModelParams,
    config: &EmConfig,
) -> Result<FitTrace> {
    config.validate()?;
    init.check_lead(federation.covariance(), std::slice::from_ref(federation.lead()))?;
    if init.sites() != federation.sites() {
        return Err(FedMixError::contract(format!(
            "initial parameters cover {} sites, federation has {}",
            init.sites(),
            federation.sites()
        )));
    }
    let start = federation.next_round();
    federation.prime(init).map_err(federation_error(start))?;
    let mut entries = vec![TraceEntry {
        iteration: 0,
        params: init.clone(),
        log_likelihood: None,
        step: None,
        traffic: None,
    }];
    let mut stop = StopReason::MaxIterations;
    for t in 0..config.max_iterations {
        let round = start + t as u64;
        let reports = federation
            .round_collect(round)
            .map_err(federation_error(round))?;
        let theta = &entries[t].params;
        let sq = build_surrogate(
            &RoundInputs {
                lead: federation.lead(),
                theta,
                reports: &reports,
                round,
            },
            federation.covariance(),
        )?;
        let means = maximize_surrogate(&sq)?;
        let weights = reports.into_iter().map(|r| r.weights).collect();
        let next = ModelParams::new(means.clone(), weights)?;
        federation
            .round_broadcast(&MeanBroadcast {
                round: round + 1,
                means,
            })
            .map_err(federation_error(round + 1))?;
        let step = d2_unaligned(&next, theta)?;
        let ledger = federation.ledger();
        let traffic = RoundTraffic {
            uplink_bytes: ledger.round(round).map_or(0, |u| u.uplink_bytes),
            downlink_bytes: ledger.round(round + 1).map_or(0, |u| u.downlink_bytes),
        };
        entries.push(TraceEntry {
            iteration: t + 1,
            params: next,
            log_likelihood: None,
            step: Some(step),
            traffic: Some(traffic),
        });
        if step < config.tolerance {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(FitTrace { entries, stop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::compute_report;
    use crate::pooled::pooled_em_step;

    fn reports_for(data: &[SiteDataset], theta: &ModelParams, cov: &Covariance, round: u64) -> Vec<GradientReport> {
        data.iter()
            .enumerate()
            .map(|(j, ds)| {
                let (weights, grad_mu) = compute_report(ds, theta.site(j), cov.site(j));
                GradientReport { site_id: j, round, weights, grad_mu }
            })
            .collect()
    }

    fn build(data: &[SiteDataset], theta: &ModelParams, cov: &Covariance) -> SurrogateQ {
        let reports = reports_for(data, theta, cov, 0);
        build_surrogate(
            &RoundInputs { lead: &data[0], theta, reports: &reports, round: 0 },
            cov,
        )
        .unwrap()
    }

    fn wavy(k: usize, n: usize, d: usize, shift: f64) -> Vec<SiteDataset> {
        (0..k)
            .map(|j| {
                let values = (0..n * d)
                    .map(|i| {
                        let base = ((i * 17 + j * 5) as f64 * 0.61).sin() * 1.3;
                        if (i / d) % 3 == 0 { base + shift } else { base }
                    })
                    .collect();
                SiteDataset::new(j, d, values).unwrap()
            })
            .collect()
    }

    #[test]
    fn scalar_term_by_term_oracle() {
        let lead = SiteDataset::from_rows(0, &[vec![0.3], vec![1.7]]).unwrap();
        let other = SiteDataset::from_rows(1, &[vec![-0.5], vec![2.2]]).unwrap();
        let var = [1.0, 2.0];
        let cov = Covariance::per_site(vec![
            DMatrix::from_element(1, 1, var[0]),
            DMatrix::from_element(1, 1, var[1]),
        ])
        .unwrap();
        let (m1, m0) = (1.5, 0.2);
        let lam = [0.4, 0.7];
        let theta = ModelParams::two_class(vec![m1], vec![m0], &lam).unwrap();
        let data = [lead, other];
        let sq = build(&data, &theta, &cov);

        let phi = |y: f64, m: f64, v: f64| (-(y - m) * (y - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let mix = |y: f64, j: usize| lam[j] * phi(y, m1, var[j]) + (1.0 - lam[j]) * phi(y, m0, var[j]);
        let ys = [[0.3, 1.7], [-0.5, 2.2]];
        let (mut a1, mut a0, mut b1, mut b0, mut g1, mut g0) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..2 {
            for &y in &ys[0] {
                let t = mix(y, j) / mix(y, 0);
                let w = lam[j] * phi(y, m1, var[j]) / mix(y, j);
                a1 += t * w / var[j] / 4.0;
                a0 += t * (1.0 - w) / var[j] / 4.0;
                b1 += t * w * y / var[j] / 4.0;
                b0 += t * (1.0 - w) * y / var[j] / 4.0;
                g1 -= t * w * (y - m1) / var[j] / 4.0;
                g0 -= t * (1.0 - w) * (y - m0) / var[j] / 4.0;
            }
            for &y in &ys[j] {
                let w = lam[j] * phi(y, m1, var[j]) / mix(y, j);
                g1 += w * (y - m1) / var[j] / 2.0 / 2.0;
                g0 += (1.0 - w) * (y - m0) / var[j] / 2.0 / 2.0;
            }
        }
        let close = |a: f64, b: f64| (a - b).abs() < 1e-13 * (1.0 + b.abs());
        assert!(close(sq.precision_mass()[0][(0, 0)], a1));
        assert!(close(sq.precision_mass()[1][(0, 0)], a0));
        assert!(close(sq.moment()[0][0], b1));
        assert!(close(sq.moment()[1][0], b0));
        assert!(close(sq.correction()[0], g1), "{} vs {g1}", sq.correction()[0]);
        assert!(close(sq.correction()[1], g0));

        // Q̃ differences against a direct evaluation of the tilted sum.
        let q = |u1: f64, u0: f64| {
            let mut total = 0.0;
            for j in 0..2 {
                for &y in &ys[0] {
                    let t = mix(y, j) / mix(y, 0);
                    let w = lam[j] * phi(y, m1, var[j]) / mix(y, j);
                    total += t * (w * phi(y, u1, var[j]).ln() + (1.0 - w) * phi(y, u0, var[j]).ln()) / 4.0;
                }
            }
            total + g1 * u1 + g0 * u0
        };
        let lhs = sq.value(&[vec![2.0], vec![-1.0]]).unwrap() - sq.value(&[vec![0.5], vec![0.4]]).unwrap();
        let rhs = q(2.0, -1.0) - q(0.5, 0.4);
        assert!(close(lhs, rhs), "{lhs} vs {rhs}");
    }

    #[test]
    fn single_site_has_zero_correction_and_matches_pooled() {
        let data = wavy(1, 40, 3, 2.0);
        let cov = Covariance::isotropic(3, 1.2, 1).unwrap();
        let theta = ModelParams::two_class(vec![1.5; 3], vec![0.0; 3], &[0.4]).unwrap();
        let sq = build(&data, &theta, &cov);
        assert!(sq.correction().iter().all(|&g| g == 0.0));
        let means = maximize_surrogate(&sq).unwrap();
        let pooled = pooled_em_step(&data, &theta, &cov).unwrap();
        assert_eq!(means, pooled.means());
    }

    #[test]
    fn equal_weights_give_unit_tilt() {
        let data = wavy(3, 25, 2, 1.5);
        let cov = Covariance::isotropic(2, 1.0, 3).unwrap();
        let theta = ModelParams::two_class(vec![1.0; 2], vec![0.0; 2], &[0.35; 3]).unwrap();
        let sq = build(&data, &theta, &cov);
        let resp = crate::model::responsibilities(&data[0], theta.site(0), cov.site(0)).unwrap();
        let mass = resp.class_means();
        let tilted = sq.tilted_mass();
        for c in 0..2 {
            assert!((tilted[c] - mass[c]).abs() < 1e-14);
        }
        let lead_grad = compute_report(&data[0], theta.site(0), cov.site(0)).1;
        let target = sq.target_gradient();
        for (i, g) in sq.correction().iter().enumerate() {
            assert!((g - (target[i] - lead_grad[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_at_anchor_equals_target() {
        let data = wavy(4, 30, 2, 2.5);
        let cov = Covariance::per_site(
            (0..4).map(|j| DMatrix::from_row_slice(2, 2, &[1.0 + 0.1 * j as f64, 0.2, 0.2, 0.8])).collect(),
        )
        .unwrap();
        let theta = ModelParams::two_class(vec![2.0, 1.0], vec![0.0, -0.3], &[0.3, 0.5, 0.6, 0.45]).unwrap();
        let sq = build(&data, &theta, &cov);
        let g = sq.gradient(theta.means()).unwrap();
        for (a, b) in g.iter().zip(sq.target_gradient()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maximizer_matches_gradient_ascent() {
        let data = wavy(3, 30, 2, 2.0);
        let cov = Covariance::isotropic(2, 0.9, 3).unwrap();
        let theta = ModelParams::two_class(vec![1.8, 1.1], vec![-0.2, 0.1], &[0.3, 0.5, 0.7]).unwrap();
        let sq = build(&data, &theta, &cov);
        let exact = maximize_surrogate(&sq).unwrap();

        let h = sq.hessian();
        let eig = h.clone().symmetric_eigen().eigenvalues;
        let lmax = eig.iter().fold(0.0f64, |m, v| m.max(-v));
        let mut mu = theta.means().to_vec();
        for _ in 0..100_000 {
            let g = sq.gradient(&mu).unwrap();
            if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
                break;
            }
            for (c, m) in mu.iter_mut().enumerate() {
                for k in 0..2 {
                    m[k] += g[c * 2 + k] / lmax;
                }
            }
        }
        for (a, b) in mu.iter().flatten().zip(exact.iter().flatten()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let residual = sq.gradient(&exact).unwrap();
        let anchor = sq.gradient(theta.means()).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(&residual) < 1e-10 * (1.0 + norm(&anchor)));
    }

    #[test]
    fn correction_shifts_solution_linearly() {
        let data = wavy(2, 20, 2, 2.0);
        let cov = Covariance::isotropic(2, 1.0, 2).unwrap();
        let theta = ModelParams::two_class(vec![1.5; 2], vec![0.0; 2], &[0.4, 0.6]).unwrap();
        let mut sq = build(&data, &theta, &cov);
        sq.correction = vec![0.0; 4];
        let base = maximize_surrogate(&sq).unwrap();
        let v = vec![0.3, -0.2, 0.1, 0.05];
        sq.correction = v.clone();
        let shifted = maximize_surrogate(&sq).unwrap();
        let a = sq.precision_mass();
        for c in 0..2 {
            let delta = a[c].clone().cholesky().unwrap().solve(&DVector::from_column_slice(&v[c * 2..c * 2 + 2]));
            for k in 0..2 {
                assert!((shifted[c][k] - base[c][k] - delta[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_or_duplicate_reports_are_rejected() {
        let data = wavy(3, 10, 2, 2.0);
        let cov = Covariance::isotropic(2, 1.0, 3).unwrap();
        let theta = ModelParams::two_class(vec![1.5; 2], vec![0.0; 2], &[0.4, 0.5, 0.6]).unwrap();
        let mut reports = reports_for(&data, &theta, &cov, 4);
        let inputs = |r: &[GradientReport]| {
            build_surrogate(&RoundInputs { lead: &data[0], theta: &theta, reports: r, round: 4 }, &cov)
        };
        assert!(matches!(inputs(&reports[..2]), Err(FedMixError::IncompleteRound { round: 4, .. })));
        reports[2].site_id = 1;
        assert!(matches!(inputs(&reports), Err(FedMixError::IncompleteRound { .. })));
        reports[2].site_id = 2;
        reports[2].round = 3;
        assert!(matches!(inputs(&reports), Err(FedMixError::IncompleteRound { .. })));
    }

    #[test]
    fn lambda_update_cases() {
        let ds = SiteDataset::from_rows(0, &[vec![0.0], vec![0.1], vec![9.9], vec![10.0], vec![10.2]]).unwrap();
        let cov = SiteCovariance::isotropic(1, 0.01).unwrap();
        let means = vec![vec![10.0], vec![0.0]];
        let w = update_lambda(&ds, SiteParams { weights: &[0.5, 0.5], means: &means }, &cov).unwrap();
        assert!((w[0] - 0.6).abs() < 1e-12);

        let same = vec![vec![1.0], vec![1.0]];
        let unit = SiteCovariance::isotropic(1, 1.0).unwrap();
        let near = SiteDataset::from_rows(0, &[vec![0.0], vec![0.5], vec![1.2], vec![2.0]]).unwrap();
        let w = update_lambda(&near, SiteParams { weights: &[0.3, 0.7], means: &same }, &unit).unwrap();
        assert!((w[0] - 0.3).abs() < 4.0 * f64::EPSILON, "{:e}", w[0] - 0.3);

        let ds = SiteDataset::from_rows(0, &[vec![-0.4], vec![0.2], vec![1.1], vec![2.5]]).unwrap();
        let cov = SiteCovariance::isotropic(1, 1.0).unwrap();
        let means = vec![vec![1.5], vec![0.0]];
        let w = update_lambda(&ds, SiteParams { weights: &[0.35, 0.65], means: &means }, &cov).unwrap();
        let oracle: f64 = [-0.4f64, 0.2, 1.1, 2.5]
            .iter()
            .map(|&y| {
                let p1 = 0.35 * (-(y - 1.5) * (y - 1.5) / 2.0).exp();
                let p0 = 0.65 * (-(y * y) / 2.0).exp();
                p1 / (p1 + p0)
            })
            .sum::<f64>()
            / 4.0;
        assert!((w[0] - oracle).abs() < 1e-15);
    }

    #[test]
    fn lambda_update_matches_pooled_step() {
        let data = wavy(3, 20, 2, 2.0);
        let cov = Covariance::isotropic(2, 1.0, 3).unwrap();
        let theta = ModelParams::two_class(vec![1.5; 2], vec![0.0; 2], &[0.4, 0.5, 0.6]).unwrap();
        let next = pooled_em_step(&data, &theta, &cov).unwrap();
        for j in 0..3 {
            let w = update_lambda(&data[j], theta.site(j), cov.site(j)).unwrap();
            assert!((w[0] - next.lambda(j)).abs() <= 1e-15);
        }
    }
}

//! In-process multi-site topology. Site 0 is the lead site and holds raw
//! data; every site, the lead included, is reached through a
//! [`SiteEndpoint`] that only exchanges encoded frames.

mod ledger;
mod messages;

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

pub use ledger::{CommLedger, RoundUsage};
pub use messages::{
    decode_header, gradient_report_len, mean_broadcast_len, GradientReport, Header, MeanBroadcast,
    MessageKind, MessageLog, FIXED_LEN, HEADER_LEN, MAGIC, VERSION,
};

use crate::error::{FedMixError, Result};
use crate::model::{
    clamp_weights, e_step, gradient_from_responsibilities, Covariance, ModelParams,
    SiteCovariance, SiteDataset, SiteParams,
};

/// A site as seen from the lead: frames in, frames out.
pub trait SiteEndpoint: Send {
    fn site_id(&self) -> usize;

    /// Session setup before round 0: the agreed initial mixing weights.
    fn prime(&mut self, weights: &[f64]) -> Result<()>;

    /// Apply an encoded [`MeanBroadcast`].
    fn deliver(&mut self, frame: &[u8]) -> Result<()>;

    /// Produce the encoded [`GradientReport`] for `round`.
    fn report(&mut self, round: u64) -> Result<Vec<u8>>;
}

/// A site computing its reports from its own data.
///
/// It caches the last broadcast means and its own mixing weights θ_j^t.
/// Each report evaluates responsibilities at θ_j^t, sends the mean
/// responsibility and ∇_μ Q_j at μ^t, then advances its weights.
pub struct LocalSite {
    data: SiteDataset,
    cov: Arc<SiteCovariance>,
    means: Option<Vec<Vec<f64>>>,
    weights: Option<Vec<f64>>,
    broadcast_round: Option<u64>,
    fail_at: Option<u64>,
}

impl LocalSite {
    pub fn new(data: SiteDataset, cov: Arc<SiteCovariance>) -> Result<Self> {
        if data.dim() != cov.dim() {
            return Err(FedMixError::DimensionMismatch {
                context: "site data vs covariance",
                expected: cov.dim(),
                actual: data.dim(),
            });
        }
        Ok(Self {
            data,
            cov,
            means: None,
            weights: None,
            broadcast_round: None,
            fail_at: None,
        })
    }

    /// Test mode: the report for `round` fails.
    pub fn fail_at_round(mut self, round: u64) -> Self {
        self.fail_at = Some(round);
        self
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }
}

/// The site's report at θ_j^t: clamped mean responsibility and the Q_j
/// gradient, from one E-step pass.
pub fn compute_report(
    data: &SiteDataset,
    snapshot: SiteParams<'_>,
    cov: &SiteCovariance,
) -> (Vec<f64>, Vec<f64>) {
    let (resp, _) = e_step(data, snapshot, cov);
    let mut weights = resp.class_means();
    clamp_weights(&mut weights);
    let grad = gradient_from_responsibilities(data, &resp, snapshot.means, cov);
    (weights, grad)
}

impl SiteEndpoint for LocalSite {
    fn site_id(&self) -> usize {
        self.data.site_id()
    }

    fn prime(&mut self, weights: &[f64]) -> Result<()> {
        self.weights = Some(weights.to_vec());
        self.means = None;
        self.broadcast_round = None;
        Ok(())
    }

    fn deliver(&mut self, frame: &[u8]) -> Result<()> {
        let msg = MeanBroadcast::decode(frame)?;
        if let Some(m) = msg.means.iter().find(|m| m.len() != self.data.dim()) {
            return Err(FedMixError::DimensionMismatch {
                context: "broadcast means vs site data",
                expected: self.data.dim(),
                actual: m.len(),
            });
        }
        if let Some(w) = &self.weights {
            if w.len() != msg.means.len() {
                return Err(FedMixError::DimensionMismatch {
                    context: "broadcast classes vs site weights",
                    expected: w.len(),
                    actual: msg.means.len(),
                });
            }
        }
        self.means = Some(msg.means);
        self.broadcast_round = Some(msg.round);
        Ok(())
    }

    fn report(&mut self, round: u64) -> Result<Vec<u8>> {
        let site = self.site_id();
        if self.fail_at == Some(round) {
            return Err(FedMixError::SiteFailure {
                site,
                reason: format!("injected failure at round {round}"),
            });
        }
        let (Some(means), Some(weights)) = (&self.means, &self.weights) else {
            return Err(FedMixError::SiteFailure {
                site,
                reason: "not initialized".into(),
            });
        };
        if self.broadcast_round != Some(round) {
            return Err(FedMixError::SiteFailure {
                site,
                reason: format!(
                    "asked for round {round} but holds the broadcast of round {:?}",
                    self.broadcast_round
                ),
            });
        }
        let snapshot = SiteParams { weights, means };
        let (next, grad) = compute_report(&self.data, snapshot, &self.cov);
        let frame = GradientReport {
            site_id: site,
            round,
            weights: next.clone(),
            grad_mu: grad,
        }
        .encode()?;
        self.weights = Some(next);
        Ok(frame)
    }
}

/// Plays back the reports of a recorded [`MessageLog`] and checks that the
/// broadcasts it receives match the recording bit for bit.
pub struct ReplayEndpoint {
    site_id: usize,
    reports: HashMap<u64, Vec<u8>>,
    broadcasts: Arc<HashMap<u64, Vec<u8>>>,
}

impl ReplayEndpoint {
    /// One endpoint per site id found in the log, ordered by id.
    pub fn from_log(log: &MessageLog) -> Result<Vec<ReplayEndpoint>> {
        let mut reports: Vec<HashMap<u64, Vec<u8>>> = Vec::new();
        let mut broadcasts = HashMap::new();
        for frame in log.frames() {
            let header = decode_header(frame)?;
            match header.kind {
                MessageKind::GradientReport => {
                    let site = GradientReport::decode(frame)?.site_id;
                    if reports.len() <= site {
                        reports.resize_with(site + 1, HashMap::new);
                    }
                    reports[site].insert(header.round, frame.clone());
                }
                MessageKind::MeanBroadcast => {
                    broadcasts.insert(header.round, frame.clone());
                }
            }
        }
        let broadcasts = Arc::new(broadcasts);
        Ok(reports
            .into_iter()
            .enumerate()
            .map(|(site_id, reports)| ReplayEndpoint {
                site_id,
                reports,
                broadcasts: Arc::clone(&broadcasts),
            })
            .collect())
    }
}

impl SiteEndpoint for ReplayEndpoint {
    fn site_id(&self) -> usize {
        self.site_id
    }

    fn prime(&mut self, _weights: &[f64]) -> Result<()> {
        Ok(())
    }

    fn deliver(&mut self, frame: &[u8]) -> Result<()> {
        let round = decode_header(frame)?.round;
        match self.broadcasts.get(&round) {
            Some(expected) if expected.as_slice() == frame => Ok(()),
            Some(_) => Err(FedMixError::SiteFailure {
                site: self.site_id,
                reason: format!("broadcast of round {round} diverges from the recording"),
            }),
            None => Err(FedMixError::SiteFailure {
                site: self.site_id,
                reason: format!("no recorded broadcast for round {round}"),
            }),
        }
    }

    fn report(&mut self, round: u64) -> Result<Vec<u8>> {
        self.reports
            .get(&round)
            .cloned()
            .ok_or_else(|| FedMixError::SiteFailure {
                site: self.site_id,
                reason: format!("no recorded report for round {round}"),
            })
    }
}

/// Lead site state plus the endpoints of all K sites.
pub struct Federation {
    lead: SiteDataset,
    cov: Covariance,
    endpoints: Vec<Box<dyn SiteEndpoint>>,
    ledger: CommLedger,
    log: Option<MessageLog>,
    parallel: bool,
    next_round: u64,
}

impl Federation {
    /// Builds a federation over `datasets`, with `datasets[0]` as the lead.
    /// Site ids are set to positions.
    pub fn new(datasets: Vec<SiteDataset>, cov: Covariance) -> Result<Self> {
        if datasets.is_empty() {
            return Err(FedMixError::contract("a federation needs at least the lead site"));
        }
        if datasets.len() != cov.sites() {
            return Err(FedMixError::DimensionMismatch {
                context: "datasets vs covariances",
                expected: cov.sites(),
                actual: datasets.len(),
            });
        }
        let datasets: Vec<SiteDataset> = datasets
            .into_iter()
            .enumerate()
            .map(|(j, d)| d.with_site_id(j))
            .collect();
        let endpoints = datasets
            .iter()
            .enumerate()
            .map(|(j, d)| {
                LocalSite::new(d.clone(), Arc::clone(cov.site(j)))
                    .map(|s| Box::new(s) as Box<dyn SiteEndpoint>)
            })
            .collect::<Result<Vec<_>>>()?;
        let lead = datasets.into_iter().next().expect("non-empty");
        Self::with_endpoints(lead, cov, endpoints)
    }

    /// Builds a federation from explicit endpoints; `endpoints[j]` must
    /// report as site j.
    pub fn with_endpoints(
        lead: SiteDataset,
        cov: Covariance,
        endpoints: Vec<Box<dyn SiteEndpoint>>,
    ) -> Result<Self> {
        if endpoints.len() != cov.sites() {
            return Err(FedMixError::DimensionMismatch {
                context: "endpoints vs covariances",
                expected: cov.sites(),
                actual: endpoints.len(),
            });
        }
        if let Some((j, _)) = endpoints.iter().enumerate().find(|(j, e)| e.site_id() != *j) {
            return Err(FedMixError::contract(format!("endpoint {j} has a different site id")));
        }
        if lead.dim() != cov.dim() {
            return Err(FedMixError::DimensionMismatch {
                context: "lead data vs covariance",
                expected: cov.dim(),
                actual: lead.dim(),
            });
        }
        Ok(Self {
            lead: lead.with_site_id(0),
            cov,
            endpoints,
            ledger: CommLedger::default(),
            log: None,
            parallel: false,
            next_round: 0,
        })
    }

    /// A fresh lead site driving the recorded reports of `log`.
    pub fn replay(lead: SiteDataset, cov: Covariance, log: &MessageLog) -> Result<Self> {
        let endpoints = ReplayEndpoint::from_log(log)?
            .into_iter()
            .map(|e| Box::new(e) as Box<dyn SiteEndpoint>)
            .collect();
        Self::with_endpoints(lead, cov, endpoints)
    }

    /// Start keeping a copy of every frame that crosses the boundary.
    pub fn record_messages(&mut self) {
        self.log.get_or_insert_with(MessageLog::default);
    }

    pub fn message_log(&self) -> Option<&MessageLog> {
        self.log.as_ref()
    }

    /// Run site handlers on the rayon pool during collection.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    /// Replace endpoint `site`, e.g. to wrap it in a test double.
    pub fn map_endpoint(
        &mut self,
        site: usize,
        f: impl FnOnce(Box<dyn SiteEndpoint>) -> Box<dyn SiteEndpoint>,
    ) -> Result<()> {
        if site >= self.endpoints.len() {
            return Err(FedMixError::contract(format!("no site {site}")));
        }
        let old = std::mem::replace(&mut self.endpoints[site], Box::new(Detached));
        self.endpoints[site] = f(old);
        Ok(())
    }

    pub fn sites(&self) -> usize {
        self.endpoints.len()
    }

    pub fn lead(&self) -> &SiteDataset {
        &self.lead
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    /// The first round not yet collected.
    pub fn next_round(&self) -> u64 {
        self.next_round
    }

    /// Session setup: hand each site its initial weights and broadcast μ⁰
    /// stamped with [`next_round`](Self::next_round).
    pub fn prime(&mut self, init: &ModelParams) -> Result<()> {
        if init.sites() != self.sites() || init.dim() != self.cov.dim() {
            return Err(FedMixError::contract(format!(
                "initial parameters cover {} sites in dimension {}, federation has {} in {}",
                init.sites(),
                init.dim(),
                self.sites(),
                self.cov.dim()
            )));
        }
        for (j, e) in self.endpoints.iter_mut().enumerate() {
            e.prime(init.weights(j))?;
        }
        self.round_broadcast(&MeanBroadcast {
            round: self.next_round,
            means: init.means().to_vec(),
        })
    }

    /// Ask every site for its round-`round` report.
    pub fn round_collect(&mut self, round: u64) -> Result<Vec<GradientReport>> {
        let frames: Vec<Result<Vec<u8>>> = if self.parallel {
            self.endpoints.par_iter_mut().map(|e| e.report(round)).collect()
        } else {
            self.endpoints.iter_mut().map(|e| e.report(round)).collect()
        };
        let mut reports = Vec::with_capacity(frames.len());
        for (j, frame) in frames.into_iter().enumerate() {
            let frame = frame.map_err(|e| FedMixError::IncompleteRound {
                round,
                reason: e.to_string(),
            })?;
            let report = GradientReport::decode(&frame).map_err(|e| {
                FedMixError::IncompleteRound {
                    round,
                    reason: format!("site {j}: {e}"),
                }
            })?;
            if report.site_id != j || report.round != round {
                return Err(FedMixError::IncompleteRound {
                    round,
                    reason: format!(
                        "endpoint {j} answered as site {} for round {}",
                        report.site_id, report.round
                    ),
                });
            }
            self.ledger.record_uplink(round, frame.len());
            if let Some(log) = &mut self.log {
                log.push(frame);
            }
            reports.push(report);
        }
        self.next_round = round + 1;
        Ok(reports)
    }

    /// Send new means to every site.
    pub fn round_broadcast(&mut self, msg: &MeanBroadcast) -> Result<()> {
        let frame = msg.encode()?;
        for (j, e) in self.endpoints.iter_mut().enumerate() {
            e.deliver(&frame)
                .map_err(|err| FedMixError::contract(format!("site {j} rejected the broadcast: {err}")))?;
            self.ledger.record_downlink(msg.round, frame.len());
        }
        if let Some(log) = &mut self.log {
            log.push(frame);
        }
        Ok(())
    }
}

/// Placeholder used while an endpoint is being swapped.
struct Detached;

impl SiteEndpoint for Detached {
    fn site_id(&self) -> usize {
        usize::MAX
    }
    fn prime(&mut self, _: &[f64]) -> Result<()> {
        Err(FedMixError::contract("detached endpoint"))
    }
    fn deliver(&mut self, _: &[u8]) -> Result<()> {
        Err(FedMixError::contract("detached endpoint"))
    }
    fn report(&mut self, _: u64) -> Result<Vec<u8>> {
        Err(FedMixError::contract("detached endpoint"))
    }
}

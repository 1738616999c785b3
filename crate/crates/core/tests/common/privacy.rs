//! Federation runs instrumented for the communication and privacy checks.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use fedmix::federation::{MessageLog, RoundUsage};
use fedmix::simgen::{generate_study, Study, StudyConfig};
use fedmix::{federated_init, run_distributed_em, EmConfig, FitTrace, Federation, SiteEndpoint};

/// Counts the calls an endpoint receives.
pub struct Counting {
    pub inner: Box<dyn SiteEndpoint>,
    pub reports: Arc<AtomicU64>,
    pub deliveries: Arc<AtomicU64>,
}

impl SiteEndpoint for Counting {
    fn site_id(&self) -> usize {
        self.inner.site_id()
    }
    fn prime(&mut self, weights: &[f64]) -> fedmix::Result<()> {
        self.inner.prime(weights)
    }
    fn deliver(&mut self, frame: &[u8]) -> fedmix::Result<()> {
        self.deliveries.fetch_add(1, Ordering::Relaxed);
        self.inner.deliver(frame)
    }
    fn report(&mut self, round: u64) -> fedmix::Result<Vec<u8>> {
        self.reports.fetch_add(1, Ordering::Relaxed);
        self.inner.report(round)
    }
}

pub fn study(sites: usize, n: usize, seed: u64) -> Study {
    let cfg = StudyConfig {
        dim: 3,
        mu1: vec![5.0; 3],
        mu0: vec![4.0; 3],
        seed,
        replications: 1,
        ..StudyConfig::standard(2.5, 0.1, sites, n)
    };
    generate_study(&cfg, 0).unwrap()
}

/// Means a little off the truth, for runs that should not converge at once.
pub fn start_means(study: &Study) -> Vec<Vec<f64>> {
    study
        .truth
        .means()
        .iter()
        .enumerate()
        .map(|(c, m)| m.iter().map(|v| v + if c == 0 { 0.4 } else { -0.3 }).collect())
        .collect()
}

pub struct RecordedRun {
    pub trace: FitTrace,
    pub rounds: Vec<RoundUsage>,
    pub log: MessageLog,
}

/// federated_init followed by distributed EM, recording every frame.
pub fn recorded_run(federation: &mut Federation, means: Vec<Vec<f64>>, config: &EmConfig) -> RecordedRun {
    federation.record_messages();
    let init = federated_init(federation, means).unwrap();
    let trace = run_distributed_em(federation, &init, config).unwrap();
    RecordedRun {
        trace,
        rounds: federation.ledger().rounds().to_vec(),
        log: federation.message_log().unwrap().clone(),
    }
}

pub fn fixed_rounds(iterations: usize) -> EmConfig {
    EmConfig {
        max_iterations: iterations,
        tolerance: f64::MIN_POSITIVE,
        seed: 0,
    }
}

/// Number of (frame, observation) pairs where the observation's 8 little-endian
/// bytes occur anywhere inside the frame.
pub fn leaked_observations(study: &Study, log: &MessageLog) -> usize {
    let needles: HashSet<[u8; 8]> = study
        .datasets
        .iter()
        .flat_map(|ds| ds.rows().flat_map(|r| r.iter().map(|v| v.to_le_bytes())).collect::<Vec<_>>())
        .collect();
    log.frames()
        .iter()
        .map(|f| {
            f.windows(8)
                .filter(|w| needles.contains(<&[u8; 8]>::try_from(*w).unwrap()))
                .count()
        })
        .sum()
}

/// Per-round message sizes of a fixed-length run at sample size `n`, and
/// the number of observation byte patterns found in its frames.
pub fn sizes_and_leaks(sites: usize, n: usize, iterations: usize) -> (Vec<RoundUsage>, usize) {
    let s = study(sites, n, 11);
    let mut fed = Federation::new(s.datasets.clone(), s.covariance.clone()).unwrap();
    let run = recorded_run(&mut fed, start_means(&s), &fixed_rounds(iterations));
    assert_eq!(run.trace.iterations(), iterations);
    (run.rounds, leaked_observations(&s, &run.log))
}

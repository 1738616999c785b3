//! CSV tables written by `fit` and `reproduce-bias-mse`. Floats use the
//! shortest representation that parses back to the same value.

use std::fmt::Write as _;
use std::path::Path;

use fedmix::experiment::{CellResult, EstimateOutput};
use fedmix::{CommLedger, FedMixError, Result};

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const ESTIMATES_HEADER: &str = "estimator,class,coord,mean";
pub const WEIGHTS_HEADER: &str = "estimator,site,class,weight";
pub const LEDGER_HEADER: &str = "round,uplink_messages,uplink_bytes,downlink_messages,downlink_bytes";
pub const REPLICATIONS_HEADER: &str = "sigma2,a,K,n,rep,estimator,bias,squared_error";

pub fn estimates_csv(outputs: &[EstimateOutput]) -> String {
    let mut s = format!("{ESTIMATES_HEADER}\n");
    for o in outputs {
        for (c, m) in o.means.iter().enumerate() {
            for (k, v) in m.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", o.estimator.name(), c, k + 1, v);
            }
        }
    }
    s
}

pub fn weights_csv(outputs: &[EstimateOutput]) -> String {
    let mut s = format!("{WEIGHTS_HEADER}\n");
    for o in outputs {
        let Some(p) = &o.params else { continue };
        for (j, w) in p.all_weights().iter().enumerate() {
            for (c, v) in w.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", o.estimator.name(), j, c, v);
            }
        }
    }
    s
}

/// One row per iterate of every traced estimator, means flattened as
/// `m{class}_{coord}`.
pub fn trace_csv(outputs: &[EstimateOutput]) -> String {
    let Some(first) = outputs.iter().find_map(|o| o.trace.as_ref()) else {
        return String::new();
    };
    let p0 = &first.entries[0].params;
    let mut s = String::from("estimator,iter,log_likelihood,step,uplink_bytes,downlink_bytes");
    for c in 0..p0.classes() {
        for k in 1..=p0.dim() {
            let _ = write!(s, ",m{c}_{k}");
        }
    }
    s.push('\n');
    for o in outputs {
        let Some(trace) = &o.trace else { continue };
        for e in &trace.entries {
            let _ = write!(
                s,
                "{},{},{},{},{},{}",
                o.estimator.name(),
                e.iteration,
                opt(e.log_likelihood),
                opt(e.step),
                opt(e.traffic.map(|t| t.uplink_bytes)),
                opt(e.traffic.map(|t| t.downlink_bytes)),
            );
            for v in e.params.means().iter().flatten() {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn ledger_csv(ledger: &CommLedger) -> String {
    let mut s = format!("{LEDGER_HEADER}\n");
    for u in ledger.rounds() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            u.round, u.uplink_messages, u.uplink_bytes, u.downlink_messages, u.downlink_bytes
        );
    }
    s
}

pub fn replications_csv(results: &[CellResult]) -> String {
    let mut s = format!("{REPLICATIONS_HEADER}\n");
    for r in results {
        let c = r.cell;
        for rep in &r.replications {
            for rec in &rep.records {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    c.sigma2,
                    c.a,
                    c.sites,
                    c.n,
                    rep.replication,
                    rec.estimator.name(),
                    rec.bias,
                    rec.squared_error
                );
            }
        }
    }
    s
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| FedMixError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| FedMixError::Io { path, source })
}

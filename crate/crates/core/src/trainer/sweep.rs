use std::fmt::Write as _;

use super::train;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecPolicy};
use crate::model::ExperimentConfig;

/// One trained model of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub test_iid_accuracy: f64,
    pub test_ood_accuracy: f64,
    pub steps_to_threshold: Option<usize>,
}

/// Trains one model per `(N, M, seed)` and evaluates it. Cells come back
/// ordered by N, then M, then seed, whatever the policy.
pub fn sweep(
    cfg: &ExperimentConfig,
    bundle: &DatasetBundle,
    ns: &[usize],
    ms: &[usize],
    seeds: &[u64],
    policy: ExecPolicy,
) -> Result<Vec<SweepCell>> {
    if ns.is_empty() || ms.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep: empty grid".into()));
    }
    if let Some(v) = ns.iter().chain(ms).find(|&&v| v == 0) {
        return Err(Error::Config(format!("sweep: grid values must be at least 1, got {v}")));
    }
    let jobs: Vec<(usize, usize, u64)> =
        ns.iter().flat_map(|&n| ms.iter().flat_map(move |&m| seeds.iter().map(move |&s| (n, m, s)))).collect();
    let results = map_indexed(policy, jobs.len(), |i| {
        let (n, m, seed) = jobs[i];
        let cell_cfg = ExperimentConfig { n, m, seed, ..cfg.clone() };
        train(&cell_cfg, bundle).map(|out| SweepCell {
            n,
            m,
            seed,
            test_iid_accuracy: out.metrics.test_iid.accuracy,
            test_ood_accuracy: out.metrics.test_ood.accuracy,
            steps_to_threshold: out.metrics.steps_to_threshold,
        })
    });
    results.into_iter().collect()
}

pub const SWEEP_CSV_HEADER: &str = "n,m,seed,test_iid_accuracy,test_ood_accuracy,steps_to_threshold";

/// Grid as CSV; a run that never reached the threshold has an empty
/// `steps_to_threshold` field.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for c in cells {
        let steps = c.steps_to_threshold.map_or(String::new(), |s| s.to_string());
        let _ = writeln!(out, "{},{},{},{},{},{steps}", c.n, c.m, c.seed, c.test_iid_accuracy, c.test_ood_accuracy);
    }
    out
}

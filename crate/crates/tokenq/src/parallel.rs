//! Replications on the rayon pool.
//!
//! Each replication owns its random streams, and results are gathered in
//! replication order, so the aggregate does not depend on thread timing.

use rayon::prelude::*;
use tokenq_core::sim::{self, RequestRecord, SimConfig, SimStats};

/// Runs every replication and aggregates them. With `trace`, the records of
/// replication 0 are returned too.
pub fn replicate(cfg: &SimConfig, trace: bool) -> tokenq_core::Result<(SimStats, Vec<RequestRecord>)> {
    let results = (0..cfg.replications)
        .into_par_iter()
        .map(|i| {
            let mut records = Vec::new();
            let seed = cfg.seed.wrapping_add(i as u64);
            let summary = if trace && i == 0 {
                sim::run_with(cfg, seed, &mut |r| records.push(r.clone()))?
            } else {
                sim::run_with(cfg, seed, &mut |_| {})?
            };
            Ok((summary, records))
        })
        .collect::<tokenq_core::Result<Vec<_>>>()?;
    let mut trace_records = Vec::new();
    let mut runs = Vec::with_capacity(results.len());
    for (i, (s, r)) in results.into_iter().enumerate() {
        if i == 0 {
            trace_records = r;
        }
        runs.push(s);
    }
    Ok((sim::aggregate(runs), trace_records))
}

/// Statistics only, in the shape the optimizer expects.
pub fn replicate_stats(cfg: &SimConfig) -> tokenq_core::Result<SimStats> {
    replicate(cfg, false).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokenq_core::dist::TokenDistribution;
    use tokenq_core::latency::SingleLatencyModel;
    use tokenq_core::sim::{LatencyModel, Policy};

    #[test]
    fn matches_sequential_replication() {
        let cfg = SimConfig {
            lambda: 0.5,
            distribution: TokenDistribution::Exponential { mean: 1.0 },
            latency: LatencyModel::Single(SingleLatencyModel { a: 1.0, c: 0.0 }),
            policy: Policy::SingleFcfs { n_max: None },
            patience: None,
            warmup: 100,
            horizon: 5_000,
            seed: 3,
            replications: 6,
        };
        let (par, trace) = replicate(&cfg, true).unwrap();
        assert_eq!(par, sim::replicate(&cfg).unwrap());
        let (_, seq_trace) = sim::run(&cfg).unwrap();
        assert_eq!(trace, seq_trace);
    }
}

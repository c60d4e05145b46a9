//! Discrete-event simulator for the four serving policies.
//!
//! A run is a single sequential pass over three kinds of events: a request
//! arrival, the server finishing its current job, and the request at the head
//! of the queue running out of patience. At equal times a completion is
//! handled before a renege and a renege before an arrival, so a batch that
//! starts at a completion instant never picks up a request arriving at that
//! same instant.
//!
//! Two ChaCha8 streams drive a run: one for inter-arrival gaps and one for
//! token counts, each advanced once per arrival. Requests leave the queue
//! (served or lost) in arrival order under every policy, which is what makes
//! warmup and trace emission simple.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::dist::TokenDistribution;
use crate::latency::{BatchLatencyModel, SingleLatencyModel};
use crate::rng::{self, ARRIVAL_STREAM, TOKEN_STREAM};
use crate::special::student_t_quantile;
use crate::{Error, Result};

/// How a fixed batch's service time is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FixedServiceMode {
    /// Every batch takes the mean padded time `H(b)`.
    DeterministicMean,
    /// Each batch takes the padded time of its own longest reply.
    SampledMax,
}

/// Serving discipline.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Policy {
    /// One request at a time, replies cut at `n_max` tokens.
    SingleFcfs { n_max: Option<f64> },
    /// An idle server takes every waiting request, up to `b_max`.
    DynamicBatch { b_max: Option<u32> },
    /// The server starts only once `b` requests are waiting.
    FixedBatch { b: u32, service_mode: FixedServiceMode },
    /// Batches form as in dynamic batching, but each reply leaves as soon as
    /// its own tokens are out.
    ElasticBatch { b_max: Option<u32> },
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Policy::SingleFcfs { n_max } => n_max.is_none_or(|n| n.is_finite() && n >= 1.0),
            Policy::DynamicBatch { b_max } | Policy::ElasticBatch { b_max } => b_max.is_none_or(|b| b >= 1),
            Policy::FixedBatch { b, .. } => b >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid policy parameters: {self:?}")))
        }
    }

    pub fn is_batching(&self) -> bool {
        !matches!(self, Policy::SingleFcfs { .. })
    }
}

/// Latency model attached to a simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LatencyModel {
    Single(SingleLatencyModel),
    Batch(BatchLatencyModel),
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            LatencyModel::Single(m) => m.validate(),
            LatencyModel::Batch(m) => m.validate(),
        }
    }

    /// Time to serve one request of `tokens` on its own.
    pub fn single_time(&self, tokens: f64) -> f64 {
        match self {
            LatencyModel::Single(m) => m.service_time(tokens),
            LatencyModel::Batch(m) => m.service_time(1, tokens),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SimConfig {
    /// Arrival rate, requests per second.
    pub lambda: f64,
    pub distribution: TokenDistribution,
    pub latency: LatencyModel,
    pub policy: Policy,
    /// Seconds a request waits before abandoning; single FCFS only.
    pub patience: Option<f64>,
    /// Served requests excluded from statistics at the start of each run.
    pub warmup: u64,
    /// Served requests after which a run stops, warmup included.
    pub horizon: u64,
    pub seed: u64,
    pub replications: u32,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::invalid(format!("arrival rate must be positive, got {}", self.lambda)));
        }
        self.distribution.validate()?;
        self.latency.validate()?;
        self.policy.validate()?;
        if let Some(tau) = self.patience {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(Error::invalid(format!("patience must be positive, got {tau}")));
            }
            if self.policy.is_batching() {
                return Err(Error::invalid("patience is only supported with single FCFS service"));
            }
        }
        if self.policy.is_batching() && matches!(self.latency, LatencyModel::Single(_)) {
            return Err(Error::invalid("batching policies need a batch latency model"));
        }
        if self.horizon <= self.warmup {
            return Err(Error::invalid(format!("horizon ({}) must exceed warmup ({})", self.horizon, self.warmup)));
        }
        if self.replications == 0 {
            return Err(Error::invalid("at least one replication is required"));
        }
        Ok(())
    }
}

/// One request's history.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RequestRecord {
    /// Arrival index within the run, from 0.
    pub id: u64,
    pub arrival: f64,
    pub service_start: Option<f64>,
    pub completion: Option<f64>,
    pub tokens_requested: f64,
    pub tokens_served: f64,
    pub lost: bool,
    /// When the request left: its completion, or `arrival + patience` if lost.
    pub departure: f64,
    pub batch_id: Option<u64>,
    pub batch_size: Option<u32>,
    /// False for requests resolved during warmup.
    pub counted: bool,
}

/// Statistics of a single run, over the requests resolved after warmup.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RunSummary {
    pub seed: u64,
    pub arrivals: u64,
    pub served: u64,
    pub lost: u64,
    pub in_system_at_end: u64,
    pub counted_served: u64,
    pub counted_lost: u64,
    /// Mean time to service start; a lost request contributes its patience.
    pub mean_wait: f64,
    pub mean_wait_served: f64,
    /// Mean arrival-to-completion time of served requests.
    pub mean_sojourn: f64,
    pub loss_fraction: f64,
    /// Mean time a served request spent in service.
    pub mean_service: f64,
    /// Fixed batching: mean time from arrival until the request's batch was
    /// complete. Zero for the other policies.
    pub mean_formation_wait: f64,
    pub mean_batch_size: f64,
    /// Served requests per second over the measurement window.
    pub throughput: f64,
    /// Busy fraction of the measurement window.
    pub utilization: f64,
    /// `(batch size, number of batches)`, ascending in size.
    pub batch_histogram: Vec<(u32, u64)>,
    pub end_time: f64,
}

/// Replication mean with a 95% Student-t half-width (absent for one run).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Estimate {
    pub mean: f64,
    pub ci_half_width: Option<f64>,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, ci_half_width: None };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let t = student_t_quantile(0.975, (n - 1) as f64);
        Self { mean, ci_half_width: Some(t * libm::sqrt(var / n as f64)) }
    }

    /// Whether `x` lies inside the interval. Without a CI only exact equality
    /// counts.
    pub fn covers(&self, x: f64) -> bool {
        match self.ci_half_width {
            Some(h) => (x - self.mean).abs() <= h,
            None => x == self.mean,
        }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci_half_width.unwrap_or(0.0)
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci_half_width.unwrap_or(0.0)
    }
}

/// Aggregate over replications.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SimStats {
    pub replications: u32,
    pub mean_wait: Estimate,
    pub mean_wait_served: Estimate,
    pub mean_sojourn: Estimate,
    pub loss_fraction: Estimate,
    pub mean_service: Estimate,
    pub mean_formation_wait: Estimate,
    pub mean_batch_size: Estimate,
    pub throughput: Estimate,
    pub utilization: Estimate,
    pub batch_histogram: Vec<(u32, u64)>,
    pub arrivals: u64,
    pub served: u64,
    pub lost: u64,
    pub in_system_at_end: u64,
    /// Some run ended with a backlog above 1% of its served requests (and
    /// above 50), so the queue was probably still growing and the means
    /// depend on the horizon.
    pub saturated: bool,
    pub runs: Vec<RunSummary>,
}

struct Pending {
    id: u64,
    arrival: f64,
    tokens: f64,
}

#[derive(Default)]
struct Acc {
    served: u64,
    lost: u64,
    wait: f64,
    wait_served: f64,
    sojourn: f64,
    service: f64,
    formation: f64,
    batches: u64,
    batch_members: u64,
    histogram: Vec<u64>,
    busy: f64,
}

/// Runs one replication with `seed`, handing every resolved request to
/// `sink` in arrival order.
pub fn run_with(config: &SimConfig, seed: u64, sink: &mut dyn FnMut(&RequestRecord)) -> Result<RunSummary> {
    config.validate()?;
    let mut arrivals_rng = rng::stream(seed, ARRIVAL_STREAM);
    let mut tokens_rng = rng::stream(seed, TOKEN_STREAM);
    let lambda = config.lambda;
    let patience = config.patience;

    let fixed_h = match (config.policy, config.latency) {
        (Policy::FixedBatch { b, service_mode: FixedServiceMode::DeterministicMean }, LatencyModel::Batch(m)) => {
            Some(m.mean_batch_time(&config.distribution, b)?)
        }
        _ => None,
    };

    let mut queue: VecDeque<Pending> = VecDeque::new();
    let mut next_arrival = rng::exponential(&mut arrivals_rng, lambda);
    let mut busy_until: Option<f64> = None;
    let mut next_id = 0u64;
    let mut next_batch = 0u64;
    let mut served = 0u64;
    let mut lost = 0u64;
    let mut now = 0.0;
    // Start of the measurement window: the dispatch that ends warmup.
    let mut window_start = if config.warmup == 0 { Some(0.0) } else { None };
    let mut acc = Acc::default();
    let mut scratch: Vec<(f64, usize)> = Vec::new();
    let mut members: Vec<Pending> = Vec::new();

    while served < config.horizon {
        let t_done = busy_until.unwrap_or(f64::INFINITY);
        let t_renege = match (patience, busy_until) {
            (Some(tau), Some(_)) => queue.front().map_or(f64::INFINITY, |p| p.arrival + tau),
            _ => f64::INFINITY,
        };

        if t_done <= t_renege && t_done <= next_arrival {
            now = t_done;
            busy_until = None;
        } else if t_renege <= next_arrival {
            now = t_renege;
            let p = queue.pop_front().expect("renege needs a waiting request");
            let tau = patience.expect("renege needs patience");
            lost += 1;
            let counted = window_start.is_some();
            if counted {
                acc.lost += 1;
                acc.wait += tau;
            }
            sink(&RequestRecord {
                id: p.id,
                arrival: p.arrival,
                service_start: None,
                completion: None,
                tokens_requested: p.tokens,
                tokens_served: 0.0,
                lost: true,
                departure: now,
                batch_id: None,
                batch_size: None,
                counted,
            });
            continue;
        } else {
            now = next_arrival;
            let tokens = config.distribution.sample(&mut tokens_rng);
            queue.push_back(Pending { id: next_id, arrival: now, tokens });
            next_id += 1;
            next_arrival = now + rng::exponential(&mut arrivals_rng, lambda);
            if busy_until.is_some() {
                continue;
            }
        }

        // The server is idle: start the next job if the policy allows.
        let take = match config.policy {
            Policy::SingleFcfs { .. } => queue.len().min(1),
            Policy::DynamicBatch { b_max } | Policy::ElasticBatch { b_max } => {
                queue.len().min(b_max.map_or(usize::MAX, |b| b as usize))
            }
            Policy::FixedBatch { b, .. } => {
                if queue.len() >= b as usize {
                    b as usize
                } else {
                    0
                }
            }
        };
        if take == 0 {
            continue;
        }

        members.clear();
        members.extend(queue.drain(..take));
        let k = take as u32;
        let start = now;
        // A fixed batch is complete once its last member has arrived.
        let ready = match config.policy {
            Policy::FixedBatch { .. } => Some(members[take - 1].arrival),
            _ => None,
        };

        let mut completions: Vec<f64> = Vec::with_capacity(take);
        let busy_time;
        let mut served_tokens: Vec<f64> = Vec::with_capacity(take);
        match (config.policy, config.latency) {
            (Policy::SingleFcfs { n_max }, lat) => {
                let n = n_max.map_or(members[0].tokens, |cap| members[0].tokens.min(cap));
                busy_time = lat.single_time(n);
                served_tokens.push(n);
                completions.push(start + busy_time);
            }
            (Policy::ElasticBatch { .. }, LatencyModel::Batch(m)) => {
                scratch.clear();
                scratch.extend(members.iter().enumerate().map(|(i, p)| (p.tokens, i)));
                scratch.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                let counts: Vec<f64> = scratch.iter().map(|x| x.0).collect();
                let (total, offsets) = m.elastic_batch_time(&counts)?;
                completions.resize(take, 0.0);
                for (rank, &(_, i)) in scratch.iter().enumerate() {
                    completions[i] = start + offsets[rank];
                }
                busy_time = total;
                served_tokens.extend(members.iter().map(|p| p.tokens));
            }
            (_, LatencyModel::Batch(m)) => {
                busy_time = match fixed_h {
                    Some(h) => h,
                    None => {
                        let l = members.iter().map(|p| p.tokens).fold(0.0, f64::max);
                        m.service_time(k, l)
                    }
                };
                completions.resize(take, start + busy_time);
                served_tokens.extend(members.iter().map(|p| p.tokens));
            }
            (_, LatencyModel::Single(_)) => unreachable!("rejected by validation"),
        }
        busy_until = Some(start + busy_time);
        let batch_id = if config.policy.is_batching() {
            next_batch += 1;
            Some(next_batch - 1)
        } else {
            None
        };

        if window_start.is_some() {
            acc.busy += busy_time;
            acc.batches += 1;
            acc.batch_members += take as u64;
            if acc.histogram.len() < take {
                acc.histogram.resize(take, 0);
            }
            acc.histogram[take - 1] += 1;
        }
        for (i, p) in members.iter().enumerate() {
            let counted = window_start.is_some();
            served += 1;
            if counted {
                let wait = start - p.arrival;
                acc.served += 1;
                acc.wait += wait;
                acc.wait_served += wait;
                acc.sojourn += completions[i] - p.arrival;
                acc.service += completions[i] - start;
                acc.formation += ready.map_or(0.0, |r| r - p.arrival);
            }
            sink(&RequestRecord {
                id: p.id,
                arrival: p.arrival,
                service_start: Some(start),
                completion: Some(completions[i]),
                tokens_requested: p.tokens,
                tokens_served: served_tokens[i],
                lost: false,
                departure: completions[i],
                batch_id,
                batch_size: batch_id.map(|_| k),
                counted,
            });
            if window_start.is_none() && served == config.warmup {
                window_start = Some(now);
            }
        }
    }

    let window_start = window_start.unwrap_or(now);
    let window = now - window_start;
    // The last job runs past the stop time; only the part inside counts.
    let overhang = busy_until.map_or(0.0, |t| (t - now).max(0.0));
    let resolved = acc.served + acc.lost;
    let div = |x: f64, n: u64| if n == 0 { f64::NAN } else { x / n as f64 };
    Ok(RunSummary {
        seed,
        arrivals: next_id,
        served,
        lost,
        in_system_at_end: queue.len() as u64,
        counted_served: acc.served,
        counted_lost: acc.lost,
        mean_wait: div(acc.wait, resolved),
        mean_wait_served: div(acc.wait_served, acc.served),
        mean_sojourn: div(acc.sojourn, acc.served),
        loss_fraction: div(acc.lost as f64, resolved),
        mean_service: div(acc.service, acc.served),
        mean_formation_wait: div(acc.formation, acc.served),
        mean_batch_size: div(acc.batch_members as f64, acc.batches),
        throughput: if window > 0.0 { acc.served as f64 / window } else { f64::NAN },
        utilization: if window > 0.0 { ((acc.busy - overhang) / window).clamp(0.0, 1.0) } else { f64::NAN },
        batch_histogram: acc
            .histogram
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i as u32 + 1, c))
            .collect(),
        end_time: now,
    })
}

/// Runs replication `i`, seeded with `config.seed + i`, without keeping
/// records.
pub fn run_replication(config: &SimConfig, i: u32) -> Result<RunSummary> {
    run_with(config, config.seed.wrapping_add(i as u64), &mut |_| {})
}

/// One replication with `config.seed`, returning its statistics and the
/// full trace.
pub fn run(config: &SimConfig) -> Result<(SimStats, Vec<RequestRecord>)> {
    let mut records = Vec::new();
    let summary = run_with(config, config.seed, &mut |r| records.push(r.clone()))?;
    Ok((aggregate(alloc::vec![summary]), records))
}

/// Runs every replication in turn and aggregates them.
pub fn replicate(config: &SimConfig) -> Result<SimStats> {
    let runs = (0..config.replications).map(|i| run_replication(config, i)).collect::<Result<Vec<_>>>()?;
    Ok(aggregate(runs))
}

fn backlogged(r: &RunSummary) -> bool {
    r.in_system_at_end > 50 && r.in_system_at_end as f64 > 0.01 * r.served as f64
}

/// Combines per-replication summaries, in replication order.
pub fn aggregate(runs: Vec<RunSummary>) -> SimStats {
    let est = |f: fn(&RunSummary) -> f64| {
        let xs: Vec<f64> = runs.iter().map(f).filter(|x| !x.is_nan()).collect();
        if xs.is_empty() {
            Estimate { mean: f64::NAN, ci_half_width: None }
        } else {
            Estimate::from_samples(&xs)
        }
    };
    let mut hist: Vec<(u32, u64)> = Vec::new();
    for r in &runs {
        for &(size, count) in &r.batch_histogram {
            match hist.binary_search_by_key(&size, |e| e.0) {
                Ok(i) => hist[i].1 += count,
                Err(i) => hist.insert(i, (size, count)),
            }
        }
    }
    SimStats {
        replications: runs.len() as u32,
        mean_wait: est(|r| r.mean_wait),
        mean_wait_served: est(|r| r.mean_wait_served),
        mean_sojourn: est(|r| r.mean_sojourn),
        loss_fraction: est(|r| r.loss_fraction),
        mean_service: est(|r| r.mean_service),
        mean_formation_wait: est(|r| r.mean_formation_wait),
        mean_batch_size: est(|r| r.mean_batch_size),
        throughput: est(|r| r.throughput),
        utilization: est(|r| r.utilization),
        batch_histogram: hist,
        arrivals: runs.iter().map(|r| r.arrivals).sum(),
        served: runs.iter().map(|r| r.served).sum(),
        lost: runs.iter().map(|r| r.lost).sum(),
        in_system_at_end: runs.iter().map(|r| r.in_system_at_end).sum(),
        saturated: runs.iter().any(backlogged),
        runs,
    }
}

/// A replication driver: runs every replication of a config and aggregates.
pub type Replicator<'a> = &'a mut dyn FnMut(&SimConfig) -> Result<SimStats>;

/// Service law of an impatience component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ComponentService {
    Deterministic,
    Exponential,
}

/// Simulated loss fraction and all-customer wait of a single server with
/// patience `tau` and deterministic or exponential service of mean `s_mean`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ComponentEstimate {
    pub loss_fraction: Estimate,
    pub mean_wait_all: Estimate,
}

#[allow(clippy::too_many_arguments)]
pub fn impatience_component(
    service: ComponentService,
    lambda: f64,
    s_mean: f64,
    tau: f64,
    warmup: u64,
    horizon: u64,
    seed: u64,
    replications: u32,
) -> Result<ComponentEstimate> {
    let distribution = match service {
        ComponentService::Deterministic => TokenDistribution::Deterministic { tokens: s_mean },
        ComponentService::Exponential => TokenDistribution::Exponential { mean: s_mean },
    };
    let cfg = SimConfig {
        lambda,
        distribution,
        latency: LatencyModel::Single(SingleLatencyModel { a: 1.0, c: 0.0 }),
        policy: Policy::SingleFcfs { n_max: None },
        patience: Some(tau),
        warmup,
        horizon,
        seed,
        replications,
    };
    let s = replicate(&cfg)?;
    Ok(ComponentEstimate { loss_fraction: s.loss_fraction, mean_wait_all: s.mean_wait })
}

//! Choosing the max-token limit and the batch size.
//!
//! Both searches run over an explicit grid and keep the whole sweep, so a
//! caller can plot the objective and see which points were excluded.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::analytic::{self, CurveShape, RootMethod, ThroughputCurve};
use crate::dist::TokenDistribution;
use crate::latency::{self, BatchLatencyModel, LinearEnvelope, SingleLatencyModel};
use crate::sim::{self, FixedServiceMode, LatencyModel, Policy, Replicator, SimConfig, SimStats};
use crate::{Error, Result};

/// `E[u | n_max]`, the mean fraction of requested tokens a user receives.
pub fn expected_utility(d: &TokenDistribution, n_max: f64) -> Result<f64> {
    d.clipped_utility_mean(n_max)
}

/// Which provider objective to maximize.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "variant", rename_all = "snake_case"))]
pub enum Variant {
    /// Patient users: `theta E[u] - (1 - theta) E[W]`.
    V1,
    /// Users leave after `patience` seconds and each loss costs `loss_cost`:
    /// `theta E[u] - (1 - theta) E[W_q] - pi loss_cost`.
    V2 { loss_cost: f64, patience: f64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenLimitObjective {
    pub variant: Variant,
    pub theta: f64,
    /// Candidate limits, ascending, each at least 1.
    pub grid: Vec<f64>,
    /// Add the delay term in V2 instead of subtracting it.
    #[cfg_attr(feature = "serde", serde(default))]
    pub literal_plus: bool,
}

impl TokenLimitObjective {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid(format!("theta {} must lie in [0, 1]", self.theta)));
        }
        if self.grid.is_empty() {
            return Err(Error::invalid("token-limit grid is empty"));
        }
        if self.grid.iter().any(|&n| !(n.is_finite() && n >= 1.0)) {
            return Err(Error::invalid("every token limit must be at least 1"));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("token-limit grid must be strictly ascending"));
        }
        if let Variant::V2 { loss_cost, patience } = self.variant {
            if !(loss_cost.is_finite() && loss_cost >= 0.0) {
                return Err(Error::invalid(format!("loss cost {loss_cost} must be nonnegative")));
            }
            if !(patience.is_finite() && patience > 0.0) {
                return Err(Error::invalid(format!("patience {patience} must be positive")));
            }
        }
        Ok(())
    }
}

/// `start, start + step, ...` up to and including `end`.
pub fn token_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(start >= 1.0 && end >= start && step > 0.0 && start.is_finite() && end.is_finite()) {
        return Err(Error::invalid(format!("bad grid {start}..={end} step {step}")));
    }
    let n = libm::floor((end - start) / step + 1e-9) as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// Delay side of one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct DelayPoint {
    /// `E[W]` for V1, `E[W_q]` over served and lost users for V2.
    pub mean_wait: f64,
    pub loss_fraction: f64,
    pub mean_wait_served: f64,
}

/// One row of a token-limit sweep.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct TokenLimitRow {
    pub n_max: f64,
    pub utility: f64,
    /// Absent when the point is excluded.
    pub delay: Option<DelayPoint>,
    pub objective: Option<f64>,
    /// Why the point was left out.
    pub excluded: Option<String>,
}

/// Best grid point with the full sweep.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Optimum<R> {
    /// Index into `rows` of the chosen point.
    pub best: usize,
    pub value: f64,
    pub rows: Vec<R>,
}

// First strict improvement wins, so ties go to the earlier (smaller) point.
fn best_index<R>(rows: &[R], score: impl Fn(&R) -> Option<f64>, maximize: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(v) = score(r) {
            let better = match best {
                None => true,
                Some((_, b)) => {
                    if maximize {
                        v > b
                    } else {
                        v < b
                    }
                }
            };
            if better {
                best = Some((i, v));
            }
        }
    }
    best
}

/// Analytic delay at `n_max`, or `Ok(Err(reason))` when the point is
/// infeasible for the objective.
pub fn analytic_delay(
    variant: Variant,
    lambda: f64,
    m: &SingleLatencyModel,
    d: &TokenDistribution,
    n_max: f64,
) -> Result<core::result::Result<DelayPoint, String>> {
    match variant {
        Variant::V1 => match analytic::clipped_mg1_wait(lambda, m, d, n_max) {
            Ok(r) => Ok(Ok(DelayPoint { mean_wait: r.mean_wait, loss_fraction: 0.0, mean_wait_served: r.mean_wait })),
            Err(Error::Unstable { rho }) => Ok(Err(format!("unstable: rho = {rho}"))),
            Err(e) => Err(e),
        },
        Variant::V2 { patience, .. } => {
            let (s1, s2) = analytic::clipped_service_moments(m, d, n_max)?;
            match analytic::impatience_blend(lambda, s1, s2, patience) {
                Ok(r) => Ok(Ok(DelayPoint {
                    mean_wait: r.mean_wait_all,
                    loss_fraction: r.loss_fraction,
                    mean_wait_served: r.mean_wait_served,
                })),
                Err(Error::ApproximationDomain { scv }) => {
                    Ok(Err(format!("squared coefficient of variation {scv} outside [0, 1]")))
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Maximizes V1 or V2 over the grid with the analytic delay formulas.
pub fn optimize_token_limit(
    obj: &TokenLimitObjective,
    lambda: f64,
    m: &SingleLatencyModel,
    d: &TokenDistribution,
) -> Result<Optimum<TokenLimitRow>> {
    m.validate()?;
    optimize_token_limit_with(obj, d, |n| analytic_delay(obj.variant, lambda, m, d, n))
}

/// Maximizes the objective with delays supplied by `delay`, which returns
/// `Ok(Err(reason))` for an infeasible point.
pub fn optimize_token_limit_with(
    obj: &TokenLimitObjective,
    d: &TokenDistribution,
    mut delay: impl FnMut(f64) -> Result<core::result::Result<DelayPoint, String>>,
) -> Result<Optimum<TokenLimitRow>> {
    obj.validate()?;
    d.validate()?;
    let theta = obj.theta;
    let mut rows = Vec::with_capacity(obj.grid.len());
    for &n in &obj.grid {
        let utility = expected_utility(d, n)?;
        let row = match delay(n)? {
            Ok(p) => {
                let value = match obj.variant {
                    Variant::V1 => theta * utility - (1.0 - theta) * p.mean_wait,
                    Variant::V2 { loss_cost, .. } => {
                        let sign = if obj.literal_plus { 1.0 } else { -1.0 };
                        theta * utility + sign * (1.0 - theta) * p.mean_wait - p.loss_fraction * loss_cost
                    }
                };
                TokenLimitRow { n_max: n, utility, delay: Some(p), objective: Some(value), excluded: None }
            }
            Err(reason) => TokenLimitRow { n_max: n, utility, delay: None, objective: None, excluded: Some(reason) },
        };
        rows.push(row);
    }
    let (best, value) = best_index(&rows, |r| r.objective, true).ok_or(Error::NoFeasiblePoint)?;
    Ok(Optimum { best, value, rows })
}

/// Run lengths for simulation-backed estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimSettings {
    pub warmup: u64,
    pub horizon: u64,
    pub seed: u64,
    pub replications: u32,
}

impl SimSettings {
    pub fn config(&self, lambda: f64, d: &TokenDistribution, latency: LatencyModel, policy: Policy) -> SimConfig {
        SimConfig {
            lambda,
            distribution: d.clone(),
            latency,
            policy,
            patience: None,
            warmup: self.warmup,
            horizon: self.horizon,
            seed: self.seed,
            replications: self.replications,
        }
    }
}

/// Simulated delay at `n_max` for the token-limit search.
///
/// Points that are unstable for V1 are excluded as in the analytic search:
/// a finite run of an overloaded queue has no steady-state mean.
pub fn simulated_delay(
    variant: Variant,
    lambda: f64,
    m: &SingleLatencyModel,
    d: &TokenDistribution,
    n_max: f64,
    settings: &SimSettings,
    replicate: Replicator<'_>,
) -> Result<core::result::Result<DelayPoint, String>> {
    let mut cfg = settings.config(lambda, d, LatencyModel::Single(*m), Policy::SingleFcfs { n_max: Some(n_max) });
    match variant {
        Variant::V1 => {
            let (s1, _) = analytic::clipped_service_moments(m, d, n_max)?;
            if lambda * s1 >= 1.0 {
                return Ok(Err(format!("unstable: rho = {}", lambda * s1)));
            }
        }
        Variant::V2 { patience, .. } => cfg.patience = Some(patience),
    }
    let s = replicate(&cfg)?;
    Ok(Ok(DelayPoint {
        mean_wait: s.mean_wait.mean,
        loss_fraction: s.loss_fraction.mean,
        mean_wait_served: s.mean_wait_served.mean,
    }))
}

/// One row of a fixed-batch sweep.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct BatchRow {
    pub b: u32,
    /// Mean padded batch time `H(b)`.
    pub batch_time: f64,
    /// `lambda H(b) / b`.
    pub load: f64,
    /// Output of the fixed-batch delay formula.
    pub delay: Option<f64>,
    pub excluded: Option<String>,
}

/// Batch size minimizing the fixed-batch delay formula over `batches`.
pub fn optimal_fixed_batch(
    lambda: f64,
    m: &BatchLatencyModel,
    d: &TokenDistribution,
    batches: impl IntoIterator<Item = u32>,
    method: RootMethod,
) -> Result<Optimum<BatchRow>> {
    m.validate()?;
    d.validate()?;
    let mut rows = Vec::new();
    for b in batches {
        if b == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let h = m.mean_batch_time(d, b)?;
        let load = lambda * h / b as f64;
        let (delay, excluded) = match analytic::fixed_batch_delay(lambda, b, h, method) {
            Ok(w) => (Some(w), None),
            Err(Error::Unstable { rho }) => (None, Some(format!("unstable: load = {rho}"))),
            Err(e) => return Err(e),
        };
        rows.push(BatchRow { b, batch_time: h, load, delay, excluded });
    }
    if rows.is_empty() {
        return Err(Error::invalid("batch range is empty"));
    }
    let (best, value) = best_index(&rows, |r| r.delay, false).ok_or(Error::NoFeasiblePoint)?;
    Ok(Optimum { best, value, rows })
}

/// One candidate policy in a comparison.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PolicyRow {
    pub name: String,
    pub policy: Policy,
    /// Closed-form mean wait (an upper bound for the dynamic rows), when a
    /// formula exists and the policy is stable.
    pub analytic: Option<f64>,
    pub simulated: Option<SimStats>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PolicyComparison {
    pub lambda: f64,
    /// Delay-minimizing fixed batch size, if any batch size is stable.
    pub b_star: Option<u32>,
    pub throughput: ThroughputCurve,
    /// The throughput curve peaks inside the range: larger batches pay more
    /// in padding than they gain.
    pub heavy_tail: bool,
    pub rows: Vec<PolicyRow>,
    pub recommended: Policy,
}

/// Compares padded dynamic batching with and without a cap, fixed batching
/// at `b*`, and elastic batching.
///
/// The fixed-batch analytic entry is the bulk-queue formula value as is; it
/// is not a per-request wait and is not comparable with the bounds in the
/// dynamic rows. The recommendation
/// is among the padded policies: the capped dynamic policy when the
/// throughput curve has an interior peak, otherwise uncapped dynamic
/// batching. With simulation the recommendation is the padded policy with
/// the lowest simulated wait among runs that did not saturate, ties going to
/// the capped one.
pub fn recommend_policy(
    lambda: f64,
    m: &BatchLatencyModel,
    d: &TokenDistribution,
    batches: impl IntoIterator<Item = u32> + Clone,
    mut simulate: Option<Replicator<'_>>,
    settings: Option<&SimSettings>,
) -> Result<PolicyComparison> {
    m.validate()?;
    d.validate()?;
    let throughput = analytic::throughput_curve(m, d, batches.clone())?;
    let heavy_tail = matches!(throughput.shape, CurveShape::InteriorMaximum { .. });
    let fixed = match optimal_fixed_batch(lambda, m, d, batches.clone(), RootMethod::Refined) {
        Ok(o) => Some(o),
        Err(Error::NoFeasiblePoint) => None,
        Err(e) => return Err(e),
    };
    let b_star = fixed.as_ref().map(|o| o.rows[o.best].b);
    let b_cap = b_star.unwrap_or(throughput.argmax);
    let b_check = batches.into_iter().max().unwrap_or(latency::DEFAULT_ENVELOPE_CHECK);
    let lin = latency::linearize(m, d, b_check)?;

    let bound = |env: LinearEnvelope| match analytic::dynamic_batch_bound(lambda, &env) {
        Ok(r) => Ok((Some(r.phi), None)),
        Err(Error::Unstable { rho }) => Ok((None, Some(format!("bound needs lambda alpha < 1, got {rho}")))),
        Err(e) => Err(e),
    };

    let mut rows = Vec::new();
    let (phi, note) = bound(lin.envelope)?;
    rows.push(PolicyRow {
        name: "dynamic".into(),
        policy: Policy::DynamicBatch { b_max: None },
        analytic: phi,
        simulated: None,
        note,
    });
    rows.push(PolicyRow {
        name: "dynamic_capped".into(),
        policy: Policy::DynamicBatch { b_max: Some(b_cap) },
        analytic: None,
        simulated: None,
        note: Some("no closed form for a capped batch".into()),
    });
    if let (Some(o), Some(b)) = (&fixed, b_star) {
        rows.push(PolicyRow {
            name: "fixed".into(),
            policy: Policy::FixedBatch { b, service_mode: FixedServiceMode::SampledMax },
            analytic: Some(o.value),
            simulated: None,
            note: Some(
                "bulk-queue formula value, which tracks the cycle-boundary queue length rather than a wait".into(),
            ),
        });
    }
    let elastic_env = LinearEnvelope::new(m.k1 + m.k3 * d.mean(), m.k2 + m.k4 * lin.l_bar)?;
    let (phi_e, note_e) = bound(elastic_env)?;
    rows.push(PolicyRow {
        name: "elastic".into(),
        policy: Policy::ElasticBatch { b_max: None },
        analytic: phi_e,
        simulated: None,
        note: note_e,
    });

    if let (Some(run), Some(settings)) = (simulate.as_mut(), settings) {
        for row in &mut rows {
            // Uncapped batches grow with the queue, so those runs are made
            // even past the bound's stability limit; `saturated` flags them.
            let stable = match row.policy {
                Policy::DynamicBatch { b_max: Some(b) } => lambda * m.mean_batch_time(d, b)? < b as f64,
                _ => true,
            };
            if stable {
                let cfg = settings.config(lambda, d, LatencyModel::Batch(*m), row.policy);
                row.simulated = Some(run(&cfg)?);
            }
        }
    }

    let padded = |r: &&PolicyRow| matches!(r.policy, Policy::DynamicBatch { .. } | Policy::FixedBatch { .. });
    let simulated_best = rows
        .iter()
        .filter(padded)
        .filter_map(|r| r.simulated.as_ref().filter(|s| !s.saturated).map(|s| (r, s.mean_wait.mean)))
        .fold(None::<(&PolicyRow, f64)>, |best, (r, w)| match best {
            Some((br, bw)) if bw < w || (bw == w && matches!(br.policy, Policy::DynamicBatch { b_max: Some(_) })) => {
                Some((br, bw))
            }
            _ => Some((r, w)),
        });
    let recommended = match simulated_best {
        Some((r, _)) => r.policy,
        None if heavy_tail => Policy::DynamicBatch { b_max: Some(b_cap) },
        None => Policy::DynamicBatch { b_max: None },
    };
    Ok(PolicyComparison { lambda, b_star, throughput, heavy_tail, rows, recommended })
}

/// Sequential replication, for callers without a thread pool.
pub fn replicate_sequential(cfg: &SimConfig) -> Result<SimStats> {
    sim::replicate(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_one() -> SingleLatencyModel {
        SingleLatencyModel { a: 0.022_992_527_173_913, c: 0.186_086_956_521_74 }
    }

    fn lognormal() -> TokenDistribution {
        TokenDistribution::LogNormal { log_mean: 7.0, log_sd: 0.7 }
    }

    #[test]
    fn deterministic_law_picks_first_limit_covering_it() {
        let d = TokenDistribution::Deterministic { tokens: 430.0 };
        let obj = TokenLimitObjective {
            variant: Variant::V1,
            theta: 0.9,
            grid: token_grid(100.0, 1000.0, 100.0).unwrap(),
            literal_plus: false,
        };
        let o = optimize_token_limit(&obj, 0.01, &SingleLatencyModel { a: 0.01, c: 0.2 }, &d).unwrap();
        assert_eq!(o.rows[o.best].n_max, 500.0);
        // Beyond 430 tokens nothing changes, so the later rows tie exactly.
        assert_eq!(o.rows[5].objective, o.rows[9].objective);
    }

    #[test]
    fn v1_interior_optimum_halves_delay() {
        let obj = TokenLimitObjective {
            variant: Variant::V1,
            theta: 119.0 / 120.0,
            grid: token_grid(100.0, 3000.0, 100.0).unwrap(),
            literal_plus: false,
        };
        let o = optimize_token_limit(&obj, 1.0 / 40.0, &table_one(), &lognormal()).unwrap();
        assert!(o.best > 0 && o.best + 1 < o.rows.len());
        let w = |i: usize| o.rows[i].delay.unwrap().mean_wait;
        assert!(w(o.best) <= 0.5 * w(o.rows.len() - 1));
    }

    #[test]
    fn sweep_matches_brute_force_and_exclusions_are_unstable_points() {
        let obj = TokenLimitObjective {
            variant: Variant::V1,
            theta: 0.99,
            grid: token_grid(100.0, 4000.0, 100.0).unwrap(),
            literal_plus: false,
        };
        let lambda = 1.0 / 28.0;
        let o = optimize_token_limit(&obj, lambda, &table_one(), &lognormal()).unwrap();
        let mut best = f64::NEG_INFINITY;
        for r in &o.rows {
            let (s1, _) = analytic::clipped_service_moments(&table_one(), &lognormal(), r.n_max).unwrap();
            assert_eq!(r.excluded.is_some(), lambda * s1 >= 1.0);
            if let Some(v) = r.objective {
                best = best.max(v);
            }
        }
        assert!(o.rows.iter().any(|r| r.excluded.is_some()));
        assert_eq!(o.value, best);
    }

    #[test]
    fn all_unstable_is_no_feasible_point() {
        let obj = TokenLimitObjective {
            variant: Variant::V1,
            theta: 0.5,
            grid: alloc::vec![2000.0, 3000.0],
            literal_plus: false,
        };
        let r = optimize_token_limit(&obj, 1.0, &table_one(), &lognormal());
        assert_eq!(r, Err(Error::NoFeasiblePoint));
    }

    #[test]
    fn v2_interior_optimum_halves_loss() {
        let obj = TokenLimitObjective {
            variant: Variant::V2 { loss_cost: 4.0, patience: 60.0 },
            theta: 0.95,
            grid: token_grid(100.0, 3000.0, 100.0).unwrap(),
            literal_plus: false,
        };
        let o = optimize_token_limit(&obj, 1.0 / 25.0, &table_one(), &lognormal()).unwrap();
        assert!(o.best > 0 && o.best + 1 < o.rows.len());
        let pi = |i: usize| o.rows[i].delay.unwrap().loss_fraction;
        assert!(pi(o.best) <= 0.5 * pi(o.rows.len() - 1));
    }

    #[test]
    fn grid_validation() {
        let mut obj =
            TokenLimitObjective { variant: Variant::V1, theta: 0.5, grid: alloc::vec![], literal_plus: false };
        assert!(obj.validate().is_err());
        obj.grid = alloc::vec![0.5, 2.0];
        assert!(obj.validate().is_err());
        obj.grid = alloc::vec![3.0, 2.0];
        assert!(obj.validate().is_err());
        obj.grid = alloc::vec![1.0, 2.0];
        obj.theta = 1.5;
        assert!(obj.validate().is_err());
        assert_eq!(token_grid(100.0, 300.0, 100.0).unwrap(), alloc::vec![100.0, 200.0, 300.0]);
    }

    #[test]
    fn deterministic_tokens_small_load_prefers_single_requests() {
        let d = TokenDistribution::Deterministic { tokens: 200.0 };
        let m = BatchLatencyModel { k1: 0.01, k2: 0.1, k3: 0.0002, k4: 0.0008 };
        let o = optimal_fixed_batch(0.01, &m, &d, 1..=16, RootMethod::Refined).unwrap();
        assert_eq!(o.rows[o.best].b, 1);
        let brute = o.rows.iter().filter_map(|r| r.delay).fold(f64::INFINITY, f64::min);
        assert_eq!(o.value, brute);
    }

    #[test]
    fn lognormal_batch_optimum_is_interior() {
        // A device twice as slow as the light-tailed fixture, so that one
        // request at a time cannot keep up with 0.43 requests per second.
        let m = BatchLatencyModel { k1: 0.02, k2: 0.2, k3: 0.0004, k4: 0.0016 };
        let o = optimal_fixed_batch(0.43, &m, &lognormal(), 1..=32, RootMethod::Refined).unwrap();
        let b = o.rows[o.best].b;
        assert!(b > 1 && b < 32, "b* = {b}");
        assert!(o.rows[0].excluded.is_some(), "a single request at a time cannot keep up");
    }

    #[test]
    fn heavy_tail_recommends_a_cap() {
        let m = BatchLatencyModel { k1: 0.01, k2: 0.1, k3: 0.0002, k4: 0.0008 };
        let c = recommend_policy(0.43, &m, &lognormal(), 1..=64, None, None).unwrap();
        assert!(c.heavy_tail);
        let b = c.b_star.unwrap();
        assert_eq!(c.recommended, Policy::DynamicBatch { b_max: Some(b) });
        let fixed = c.rows.iter().find(|r| r.name == "fixed").unwrap();
        assert!(fixed.analytic.unwrap() > 0.0);

        let light = recommend_policy(1.0, &m, &TokenDistribution::Uniform { max: 1000.0 }, 1..=64, None, None).unwrap();
        assert!(!light.heavy_tail);
        assert_eq!(light.recommended, Policy::DynamicBatch { b_max: None });
        let dynamic = light.rows[0].analytic.unwrap();
        let elastic = light.rows.iter().find(|r| r.name == "elastic").unwrap().analytic.unwrap();
        assert!(elastic <= dynamic);
    }
}

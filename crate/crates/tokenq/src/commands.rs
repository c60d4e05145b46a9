//! The five subcommands. Each one computes everything first, then writes its
//! outputs and `manifest.json` into the output directory.

use std::path::{Path, PathBuf};

use serde::Serialize;
use tokenq_core::analytic::{self, RootMethod, ThroughputCurve};
use tokenq_core::latency::{self, LinearEnvelope, Linearization};
use tokenq_core::optimize::{
    self, BatchRow, Optimum, PolicyComparison, SimSettings, TokenLimitObjective, TokenLimitRow, Variant,
};
use tokenq_core::sim::{LatencyModel, Policy, RequestRecord, SimStats};
use tokenq_core::Error as CoreError;

use crate::config::{self, ObjectiveKind, Overrides, Resolved, SweepParameter};
use crate::error::{CliError, Result};
use crate::io::{self, cell, ModelFile, Outputs, Table};
use crate::manifest::{self, OutputEntry, RunManifest, Timestamps};
use crate::parallel;

pub const SWEEP_HEADER: [&str; 14] = [
    "parameter",
    "value",
    "lambda",
    "n_max",
    "b",
    "rho",
    "mean_wait",
    "loss_fraction",
    "mean_wait_served",
    "phi0",
    "phi1",
    "phi",
    "feasible",
    "note",
];
pub const THROUGHPUT_HEADER: [&str; 3] = ["b", "mean_batch_time", "throughput"];
pub const TRACE_HEADER: [&str; 8] = [
    "arrival_s",
    "service_start_s",
    "completion_s",
    "tokens_requested",
    "tokens_served",
    "lost",
    "batch_id",
    "batch_size",
];
pub const TOKEN_SWEEP_HEADER: [&str; 8] =
    ["n_max", "utility", "mean_wait", "loss_fraction", "mean_wait_served", "objective", "feasible", "note"];
pub const BATCH_SWEEP_HEADER: [&str; 6] = ["b", "mean_batch_time", "load", "formula_value", "feasible", "note"];
pub const COMPARISON_HEADER: [&str; 10] = [
    "lambda",
    "policy",
    "b_max",
    "analytic_wait",
    "sim_mean_wait",
    "sim_ci_half_width",
    "sim_saturated",
    "recommended",
    "heavy_tail",
    "note",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Single,
    Batch,
}

/// Writes `outputs` and the manifest. Returns the paths written.
fn finish<T: Serialize>(
    command: &str,
    hash: &str,
    seed: Option<u64>,
    inputs: &T,
    outputs: Outputs,
    out_dir: &Path,
    started: f64,
) -> Result<Vec<PathBuf>> {
    let entries = outputs
        .files()
        .iter()
        .map(|(name, bytes)| OutputEntry { path: name.clone(), sha256: manifest::sha256_hex(bytes) })
        .collect();
    let m = RunManifest {
        tool: manifest::TOOL,
        version: manifest::VERSION,
        command,
        manifest_hash: hash,
        seed,
        inputs,
        outputs: entries,
        timestamps: Timestamps { started_unix_s: started, finished_unix_s: manifest::unix_now() },
    };
    let mut all = outputs;
    all.add_json("manifest.json", &m)?;
    all.write_all(out_dir)
}

// ---------------------------------------------------------------- fit

#[derive(Serialize)]
struct FitInputs {
    mode: FitMode,
    input_sha256: String,
}

pub fn fit(input: &Path, mode: FitMode, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let started = manifest::unix_now();
    let raw = std::fs::read(input).map_err(|e| CliError::io(input, e))?;
    let rows = io::read_calibration(input)?;
    let file = match mode {
        FitMode::Single => {
            if let Some(r) = rows.iter().find(|r| r.batch_size != 1.0) {
                return Err(CliError::Input(format!(
                    "single mode needs batch_size = 1 on every row, found {}",
                    r.batch_size
                )));
            }
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.output_tokens, r.latency_s)).collect();
            let f = latency::fit_single(&pts)?;
            ModelFile {
                model: LatencyModel::Single(f.model),
                residuals: f.residuals,
                max_abs_residual: f.max_abs_residual,
                points: pts.len(),
                manifest_hash: None,
            }
        }
        FitMode::Batch => {
            let pts: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r.batch_size, r.output_tokens, r.latency_s)).collect();
            let f = latency::fit_batch(&pts)?;
            ModelFile {
                model: LatencyModel::Batch(f.model),
                residuals: f.residuals,
                max_abs_residual: f.max_abs_residual,
                points: pts.len(),
                manifest_hash: None,
            }
        }
    };
    let inputs = FitInputs { mode, input_sha256: manifest::sha256_hex(&raw) };
    let hash = manifest::run_hash("fit", &inputs)?;
    let mut outputs = Outputs::default();
    outputs.add_json("model.json", &ModelFile { manifest_hash: Some(hash.clone()), ..file })?;
    finish("fit", &hash, None, &inputs, outputs, out_dir, started)
}

// ------------------------------------------------------------ analyze

/// One evaluated point of an analysis sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisPoint {
    pub parameter: Option<SweepParameter>,
    pub value: Option<f64>,
    pub lambda: f64,
    pub policy: Policy,
    pub n_max: Option<f64>,
    pub b: Option<u32>,
    /// Server load: `lambda E[S]`, `lambda H(b) / b`, or `lambda alpha`.
    pub rho: Option<f64>,
    pub mean_wait: Option<f64>,
    pub loss_fraction: Option<f64>,
    pub mean_wait_served: Option<f64>,
    pub phi0: Option<f64>,
    pub phi1: Option<f64>,
    pub phi: Option<f64>,
    pub feasible: bool,
    pub note: Option<String>,
}

impl AnalysisPoint {
    fn new(lambda: f64, policy: Policy) -> Self {
        let (n_max, b) = match policy {
            Policy::SingleFcfs { n_max } => (n_max, None),
            Policy::DynamicBatch { b_max } | Policy::ElasticBatch { b_max } => (None, b_max),
            Policy::FixedBatch { b, .. } => (None, Some(b)),
        };
        Self {
            parameter: None,
            value: None,
            lambda,
            policy,
            n_max,
            b,
            rho: None,
            mean_wait: None,
            loss_fraction: None,
            mean_wait_served: None,
            phi0: None,
            phi1: None,
            phi: None,
            feasible: false,
            note: None,
        }
    }

    fn infeasible(mut self, note: String) -> Self {
        self.feasible = false;
        self.note = Some(note);
        self
    }
}

/// Maps model-level infeasibility to `Ok(None)` with a reason.
fn soft<T>(r: tokenq_core::Result<T>) -> Result<std::result::Result<T, String>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(
            e @ (CoreError::Unstable { .. }
            | CoreError::ApproximationDomain { .. }
            | CoreError::EnvelopeViolation { .. }),
        ) => Ok(Err(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn service_moments(r: &Resolved, n_max: Option<f64>) -> Result<(f64, f64)> {
    let m = r.single_model()?;
    Ok(match n_max {
        Some(n) => analytic::clipped_service_moments(&m, &r.distribution, n)?,
        None => {
            let s1 = m.a * r.distribution.mean() + m.c;
            (s1, s1 * s1 + m.a * m.a * r.distribution.variance())
        }
    })
}

/// Analytic evaluation of one `(lambda, policy)` point.
pub fn analyze_point(r: &Resolved, lambda: f64, policy: Policy, lin: Option<&Linearization>) -> Result<AnalysisPoint> {
    policy.validate()?;
    let mut p = AnalysisPoint::new(lambda, policy);
    let d = &r.distribution;
    match policy {
        Policy::SingleFcfs { n_max } => {
            let (s1, s2) = service_moments(r, n_max)?;
            p.rho = Some(lambda * s1);
            match r.patience {
                Some(tau) => match soft(analytic::impatience_blend(lambda, s1, s2, tau))? {
                    Ok(b) => {
                        p.mean_wait = Some(b.mean_wait_all);
                        p.loss_fraction = Some(b.loss_fraction);
                        p.mean_wait_served = Some(b.mean_wait_served);
                        p.feasible = true;
                    }
                    Err(why) => return Ok(p.infeasible(why)),
                },
                None => match soft(analytic::mg1_wait(lambda, s1, s2))? {
                    Ok(w) => {
                        p.mean_wait = Some(w.mean_wait);
                        p.loss_fraction = Some(0.0);
                        p.mean_wait_served = Some(w.mean_wait);
                        p.feasible = true;
                    }
                    Err(why) => return Ok(p.infeasible(why)),
                },
            }
        }
        Policy::DynamicBatch { b_max: Some(_) } | Policy::ElasticBatch { b_max: Some(_) } => {
            return Ok(p.infeasible("no closed form for a capped batch; use simulate".into()));
        }
        Policy::DynamicBatch { b_max: None } | Policy::ElasticBatch { b_max: None } => {
            let m = r.batch_model()?;
            let lin = match lin {
                Some(l) => *l,
                None => match soft(latency::linearize(&m, d, *r.batch_range().end()))? {
                    Ok(l) => l,
                    Err(why) => return Ok(p.infeasible(why)),
                },
            };
            let env = if matches!(policy, Policy::ElasticBatch { .. }) {
                LinearEnvelope::new(m.k1 + m.k3 * d.mean(), m.k2 + m.k4 * lin.l_bar)?
            } else {
                lin.envelope
            };
            p.rho = Some(lambda * env.alpha);
            match soft(analytic::dynamic_batch_bound(lambda, &env))? {
                Ok(bound) => {
                    p.phi0 = Some(bound.phi0);
                    p.phi1 = Some(bound.phi1);
                    p.phi = Some(bound.phi);
                    p.feasible = true;
                    p.note = Some("phi bounds the mean wait from above".into());
                }
                Err(why) => return Ok(p.infeasible(why)),
            }
        }
        Policy::FixedBatch { b, .. } => {
            let m = r.batch_model()?;
            let h = m.mean_batch_time(d, b)?;
            p.rho = Some(lambda * h / b as f64);
            match soft(analytic::fixed_batch_delay(lambda, b, h, r.root_method()))? {
                Ok(v) => {
                    p.mean_wait = Some(v);
                    p.feasible = true;
                    p.note = Some("bulk-queue formula value".into());
                }
                Err(why) => return Ok(p.infeasible(why)),
            }
        }
    }
    Ok(p)
}

fn swept_policy(base: Policy, parameter: SweepParameter, value: f64) -> Result<Policy> {
    let as_batch = || -> Result<u32> {
        if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
            Ok(value as u32)
        } else {
            Err(CliError::Input(format!("batch size {value} must be a positive integer")))
        }
    };
    Ok(match (parameter, base) {
        (SweepParameter::Lambda, p) => p,
        (SweepParameter::NMax, Policy::SingleFcfs { .. }) => Policy::SingleFcfs { n_max: Some(value) },
        (SweepParameter::B, Policy::FixedBatch { service_mode, .. }) => {
            Policy::FixedBatch { b: as_batch()?, service_mode }
        }
        (SweepParameter::B, Policy::DynamicBatch { .. }) => Policy::DynamicBatch { b_max: Some(as_batch()?) },
        (SweepParameter::B, Policy::ElasticBatch { .. }) => Policy::ElasticBatch { b_max: Some(as_batch()?) },
        (param, p) => {
            return Err(CliError::Input(format!("cannot sweep {param:?} for policy {p:?}")));
        }
    })
}

#[derive(Serialize)]
struct AnalysisReport<'a> {
    manifest_hash: &'a str,
    lambda: f64,
    policy: Policy,
    points: &'a [AnalysisPoint],
    linearization: Option<Linearization>,
    throughput: Option<ThroughputCurve>,
}

pub fn analyze(config: &Path, overrides: &Overrides, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let started = manifest::unix_now();
    let r = config::load(config, overrides)?;
    let hash = manifest::run_hash("analyze", &r)?;
    let policy = r.policy_or_default();

    let batch = match r.latency {
        Some(LatencyModel::Batch(m)) => Some(m),
        _ => None,
    };
    let lin = match batch {
        Some(m) if policy.is_batching() => soft(latency::linearize(&m, &r.distribution, *r.batch_range().end()))?.ok(),
        _ => None,
    };
    let throughput = batch.map(|m| analytic::throughput_curve(&m, &r.distribution, r.batch_range())).transpose()?;

    let mut points = Vec::new();
    match &r.sweep {
        Some(s) => {
            for &v in &s.values {
                let lambda = if s.parameter == SweepParameter::Lambda { v } else { r.lambda };
                let mut p = analyze_point(&r, lambda, swept_policy(policy, s.parameter, v)?, lin.as_ref())?;
                p.parameter = Some(s.parameter);
                p.value = Some(v);
                points.push(p);
            }
        }
        None => points.push(analyze_point(&r, r.lambda, policy, lin.as_ref())?),
    }
    if points.iter().all(|p| !p.feasible) {
        let why = points.iter().filter_map(|p| p.note.clone()).next().unwrap_or_default();
        return Err(CliError::Infeasible(format!("every analysis point is infeasible ({why})")));
    }

    let mut sweep = Table::new(&SWEEP_HEADER)?;
    for p in &points {
        sweep.row([
            p.parameter.map(|x| sweep_name(x).to_string()).unwrap_or_default(),
            cell(p.value),
            p.lambda.to_string(),
            cell(p.n_max),
            p.b.map(|b| b.to_string()).unwrap_or_default(),
            cell(p.rho),
            cell(p.mean_wait),
            cell(p.loss_fraction),
            cell(p.mean_wait_served),
            cell(p.phi0),
            cell(p.phi1),
            cell(p.phi),
            p.feasible.to_string(),
            p.note.clone().unwrap_or_default(),
        ])?;
    }

    let mut outputs = Outputs::default();
    outputs.add_json(
        "report.json",
        &AnalysisReport {
            manifest_hash: &hash,
            lambda: r.lambda,
            policy,
            points: &points,
            linearization: lin,
            throughput: throughput.clone(),
        },
    )?;
    outputs.add("sweep.csv", sweep.into_bytes()?);
    if let (Some(m), Some(curve)) = (batch, &throughput) {
        let mut t = Table::new(&THROUGHPUT_HEADER)?;
        for &(b, mu) in &curve.points {
            t.row([b.to_string(), m.mean_batch_time(&r.distribution, b)?.to_string(), mu.to_string()])?;
        }
        outputs.add("throughput.csv", t.into_bytes()?);
    }
    finish("analyze", &hash, None, &r, outputs, out_dir, started)
}

fn sweep_name(p: SweepParameter) -> &'static str {
    match p {
        SweepParameter::Lambda => "lambda",
        SweepParameter::NMax => "n_max",
        SweepParameter::B => "b",
    }
}

// ----------------------------------------------------------- simulate

#[derive(Serialize)]
struct StatsDoc<'a> {
    manifest_hash: &'a str,
    seed: u64,
    config: &'a Resolved,
    #[serde(flatten)]
    stats: &'a SimStats,
}

pub fn trace_csv(records: &[RequestRecord]) -> Result<Vec<u8>> {
    let mut t = Table::new(&TRACE_HEADER)?;
    for rec in records {
        t.row([
            rec.arrival.to_string(),
            cell(rec.service_start),
            cell(rec.completion),
            rec.tokens_requested.to_string(),
            rec.tokens_served.to_string(),
            u8::from(rec.lost).to_string(),
            rec.batch_id.map(|b| b.to_string()).unwrap_or_default(),
            rec.batch_size.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
    }
    t.into_bytes()
}

pub fn simulate(config: &Path, overrides: &Overrides, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let started = manifest::unix_now();
    let r = config::load(config, overrides)?;
    let hash = manifest::run_hash("simulate", &r)?;
    let cfg = r.sim_config(r.lambda, r.policy_or_default())?;
    let (stats, records) = parallel::replicate(&cfg, r.sim.trace)?;

    let mut outputs = Outputs::default();
    outputs.add_json("stats.json", &StatsDoc { manifest_hash: &hash, seed: r.sim.seed, config: &r, stats: &stats })?;
    if r.sim.trace {
        outputs.add("trace.csv", trace_csv(&records)?);
    }
    finish("simulate", &hash, Some(r.sim.seed), &r, outputs, out_dir, started)
}

// ----------------------------------------------------------- optimize

#[derive(Serialize)]
struct TokenOptimumDoc<'a> {
    manifest_hash: &'a str,
    objective: ObjectiveKind,
    method: &'static str,
    lambda: f64,
    n_max: f64,
    value: f64,
    /// The optimum is neither the smallest nor the largest grid point.
    interior: bool,
    optimum: &'a Optimum<TokenLimitRow>,
}

#[derive(Serialize)]
struct BatchOptimumDoc<'a> {
    manifest_hash: &'a str,
    objective: ObjectiveKind,
    lambda: f64,
    b_star: u32,
    value: f64,
    root_method: RootMethod,
    optimum: &'a Optimum<BatchRow>,
}

fn settings(r: &Resolved) -> SimSettings {
    SimSettings { warmup: r.sim.warmup, horizon: r.sim.horizon, seed: r.sim.seed, replications: r.sim.replications }
}

pub fn optimize(config: &Path, overrides: &Overrides, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let started = manifest::unix_now();
    let r = config::load(config, overrides)?;
    let obj = r
        .objective
        .clone()
        .ok_or_else(|| CliError::Input("optimize needs --objective or an [objective] section".into()))?;
    let hash = manifest::run_hash("optimize", &r)?;
    let d = &r.distribution;
    let mut outputs = Outputs::default();

    match obj.kind {
        ObjectiveKind::V1 | ObjectiveKind::V2 => {
            let variant = match obj.kind {
                ObjectiveKind::V1 => Variant::V1,
                _ => Variant::V2 {
                    loss_cost: obj
                        .loss_cost
                        .ok_or_else(|| CliError::Input("the v2 objective needs loss_cost".into()))?,
                    patience: r
                        .patience
                        .ok_or_else(|| CliError::Input("the v2 objective needs workload.patience".into()))?,
                },
            };
            let tlo = TokenLimitObjective {
                variant,
                theta: obj.theta,
                grid: obj.grid.clone(),
                literal_plus: obj.literal_plus,
            };
            let m = r.single_model()?;
            let best = if obj.simulate {
                let s = settings(&r);
                optimize::optimize_token_limit_with(&tlo, d, |n| {
                    optimize::simulated_delay(variant, r.lambda, &m, d, n, &s, &mut parallel::replicate_stats)
                })?
            } else {
                optimize::optimize_token_limit(&tlo, r.lambda, &m, d)?
            };
            let mut t = Table::new(&TOKEN_SWEEP_HEADER)?;
            for row in &best.rows {
                t.row([
                    row.n_max.to_string(),
                    row.utility.to_string(),
                    cell(row.delay.map(|p| p.mean_wait)),
                    cell(row.delay.map(|p| p.loss_fraction)),
                    cell(row.delay.map(|p| p.mean_wait_served)),
                    cell(row.objective),
                    row.objective.is_some().to_string(),
                    row.excluded.clone().unwrap_or_default(),
                ])?;
            }
            outputs.add_json(
                "optimum.json",
                &TokenOptimumDoc {
                    manifest_hash: &hash,
                    objective: obj.kind,
                    method: if obj.simulate { "simulation" } else { "analytic" },
                    lambda: r.lambda,
                    n_max: best.rows[best.best].n_max,
                    value: best.value,
                    interior: best.best > 0 && best.best + 1 < best.rows.len(),
                    optimum: &best,
                },
            )?;
            outputs.add("token_sweep.csv", t.into_bytes()?);
        }
        ObjectiveKind::Batch => {
            if obj.simulate {
                return Err(CliError::Input("simulation applies to the v1 and v2 objectives only".into()));
            }
            let m = r.batch_model()?;
            let best = optimize::optimal_fixed_batch(r.lambda, &m, d, r.batch_range(), obj.root_method)?;
            let mut t = Table::new(&BATCH_SWEEP_HEADER)?;
            for row in &best.rows {
                t.row([
                    row.b.to_string(),
                    row.batch_time.to_string(),
                    row.load.to_string(),
                    cell(row.delay),
                    row.delay.is_some().to_string(),
                    row.excluded.clone().unwrap_or_default(),
                ])?;
            }
            outputs.add_json(
                "optimum.json",
                &BatchOptimumDoc {
                    manifest_hash: &hash,
                    objective: obj.kind,
                    lambda: r.lambda,
                    b_star: best.rows[best.best].b,
                    value: best.value,
                    root_method: obj.root_method,
                    optimum: &best,
                },
            )?;
            outputs.add("batch_sweep.csv", t.into_bytes()?);
        }
    }
    let seed = obj.simulate.then_some(r.sim.seed);
    finish("optimize", &hash, seed, &r, outputs, out_dir, started)
}

// ------------------------------------------------------------ compare

#[derive(Serialize)]
struct ComparisonDoc<'a> {
    manifest_hash: &'a str,
    simulated: bool,
    comparisons: &'a [PolicyComparison],
}

/// Policy comparison at each swept arrival rate (or the configured one).
pub fn compare_rates(r: &Resolved, simulate: bool) -> Result<Vec<PolicyComparison>> {
    let lambdas = match &r.sweep {
        None => vec![r.lambda],
        Some(s) if s.parameter == SweepParameter::Lambda => s.values.clone(),
        Some(s) => return Err(CliError::Input(format!("compare sweeps lambda only, not {}", sweep_name(s.parameter)))),
    };
    let m = r.batch_model()?;
    let s = settings(r);
    lambdas
        .iter()
        .map(|&lambda| {
            let mut rep = parallel::replicate_stats;
            let sim: Option<tokenq_core::sim::Replicator<'_>> = if simulate { Some(&mut rep) } else { None };
            Ok(optimize::recommend_policy(lambda, &m, &r.distribution, r.batch_range(), sim, Some(&s))?)
        })
        .collect()
}

fn policy_cap(p: &Policy) -> Option<u32> {
    match *p {
        Policy::DynamicBatch { b_max } | Policy::ElasticBatch { b_max } => b_max,
        Policy::FixedBatch { b, .. } => Some(b),
        Policy::SingleFcfs { .. } => None,
    }
}

pub fn compare(config: &Path, overrides: &Overrides, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let started = manifest::unix_now();
    let r = config::load(config, overrides)?;
    let simulate = overrides.simulate || r.objective.as_ref().is_some_and(|o| o.simulate);
    let hash = manifest::run_hash("compare", &(&r, simulate))?;
    let comparisons = compare_rates(&r, simulate)?;

    let mut t = Table::new(&COMPARISON_HEADER)?;
    for c in &comparisons {
        for row in &c.rows {
            let sim = row.simulated.as_ref();
            t.row([
                c.lambda.to_string(),
                row.name.clone(),
                policy_cap(&row.policy).map(|b| b.to_string()).unwrap_or_default(),
                cell(row.analytic),
                cell(sim.map(|s| s.mean_wait.mean)),
                cell(sim.and_then(|s| s.mean_wait.ci_half_width)),
                sim.map(|s| s.saturated.to_string()).unwrap_or_default(),
                (row.policy == c.recommended).to_string(),
                c.heavy_tail.to_string(),
                row.note.clone().unwrap_or_default(),
            ])?;
        }
    }
    let mut outputs = Outputs::default();
    outputs.add_json(
        "comparison.json",
        &ComparisonDoc { manifest_hash: &hash, simulated: simulate, comparisons: &comparisons },
    )?;
    outputs.add("comparison.csv", t.into_bytes()?);
    finish("compare", &hash, simulate.then_some(r.sim.seed), &r, outputs, out_dir, started)
}

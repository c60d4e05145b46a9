//! Run configuration: TOML by default, JSON when the file ends in `.json`.
//!
//! Relative paths inside a config (empirical token files, fitted models)
//! resolve against the directory holding the config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokenq_core::analytic::RootMethod;
use tokenq_core::dist::{Empirical, TokenDistribution};
use tokenq_core::latency::{BatchLatencyModel, SingleLatencyModel};
use tokenq_core::sim::{LatencyModel, Policy};

use crate::error::{CliError, Result};
use crate::io;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "TOKENQ_SEED";

/// Batch sizes tried when the config gives no `batch_range`.
pub const DEFAULT_BATCH_RANGE: [u32; 2] = [1, 128];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub workload: RawWorkload,
    pub latency: Option<RawLatency>,
    pub policy: Option<Policy>,
    pub objective: Option<RawObjective>,
    pub sim: Option<SimSection>,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawWorkload {
    /// Requests per second.
    pub lambda: f64,
    pub distribution: RawDistribution,
    /// Seconds a user waits before leaving.
    pub patience: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RawDistribution {
    Deterministic {
        tokens: f64,
    },
    Uniform {
        max: f64,
    },
    TruncatedGaussian {
        mean: f64,
        sd: f64,
    },
    Lognormal {
        log_mean: f64,
        log_sd: f64,
    },
    Exponential {
        mean: f64,
    },
    Empirical {
        /// CSV with a `tokens,probability` header.
        csv: Option<PathBuf>,
        /// One token count per line.
        samples_file: Option<PathBuf>,
        samples: Option<Vec<f64>>,
        points: Option<Vec<(f64, f64)>>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RawLatency {
    Single {
        a: f64,
        c: f64,
    },
    Batch {
        k1: f64,
        k2: f64,
        k3: f64,
        k4: f64,
    },
    /// A model file written by `tokenq fit`.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    V1,
    V2,
    Batch,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawObjective {
    pub kind: ObjectiveKind,
    #[serde(default = "default_theta")]
    pub theta: f64,
    pub loss_cost: Option<f64>,
    /// Token-limit candidates, either a list or a `{start, end, step}` range.
    pub grid: Option<Grid>,
    #[serde(default)]
    pub literal_plus: bool,
    /// Inclusive batch-size range `[lo, hi]`.
    pub batch_range: Option<[u32; 2]>,
    /// Largest batch that fits in accelerator memory; trims `batch_range`.
    pub b_feasible: Option<u32>,
    #[serde(default)]
    pub root_method: RootMethod,
    /// Use simulated delays instead of the formulas.
    #[serde(default)]
    pub simulate: bool,
}

fn default_theta() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Range { start: f64, end: f64, step: f64 },
    List(Vec<f64>),
}

impl Grid {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            Grid::Range { start, end, step } => Ok(tokenq_core::optimize::token_grid(*start, *end, *step)?),
            Grid::List(v) => Ok(v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub replications: u32,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    /// Write the first replication's per-request trace.
    #[serde(default = "default_true")]
    pub trace: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            replications: default_reps(),
            warmup: default_warmup(),
            horizon: default_horizon(),
            trace: true,
        }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_reps() -> u32 {
    10
}
fn default_warmup() -> u64 {
    1_000
}
fn default_horizon() -> u64 {
    100_000
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Lambda,
    NMax,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Grid,
}

/// A config with every file reference loaded and every default filled in.
/// Its canonical JSON form is what the manifest hash covers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub lambda: f64,
    pub distribution: TokenDistribution,
    pub patience: Option<f64>,
    pub latency: Option<LatencyModel>,
    pub policy: Option<Policy>,
    pub objective: Option<Objective>,
    pub sim: SimSection,
    pub sweep: Option<ResolvedSweep>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub theta: f64,
    pub loss_cost: Option<f64>,
    pub grid: Vec<f64>,
    pub literal_plus: bool,
    pub batch_range: [u32; 2],
    pub root_method: RootMethod,
    pub simulate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedSweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replications: Option<u32>,
    pub objective: Option<ObjectiveKind>,
    pub simulate: bool,
}

pub fn parse(text: &str, json: bool) -> Result<RawConfig> {
    if json {
        serde_json::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))
    } else {
        toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Reads, resolves and validates the config at `path`.
pub fn load(path: &Path, overrides: &Overrides) -> Result<Resolved> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let raw = parse(&text, is_json(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => {
            Some(v.trim().parse::<u64>().map_err(|_| CliError::Input(format!("{SEED_ENV}={v} is not a u64 seed")))?)
        }
        Err(_) => None,
    };
    resolve(raw, &base, overrides, env_seed)
}

/// Seed precedence: `--seed`, then the environment, then the file.
pub fn resolve(raw: RawConfig, base: &Path, overrides: &Overrides, env_seed: Option<u64>) -> Result<Resolved> {
    let distribution = resolve_distribution(&raw.workload.distribution, base)?;
    distribution.validate()?;
    let latency = raw.latency.as_ref().map(|l| resolve_latency(l, base)).transpose()?;
    if let Some(l) = &latency {
        l.validate()?;
    }
    if let Some(p) = &raw.policy {
        p.validate()?;
    }

    let mut sim = raw.sim.clone().unwrap_or_default();
    if let Some(s) = env_seed {
        sim.seed = s;
    }
    if let Some(s) = overrides.seed {
        sim.seed = s;
    }
    if let Some(r) = overrides.replications {
        sim.replications = r;
    }
    if sim.replications == 0 {
        return Err(CliError::Input("replications must be at least 1".into()));
    }
    if sim.horizon <= sim.warmup {
        return Err(CliError::Input(format!("sim.horizon ({}) must exceed sim.warmup ({})", sim.horizon, sim.warmup)));
    }

    let objective = match (&raw.objective, overrides.objective) {
        (Some(o), kind) => Some(resolve_objective(o, kind, overrides.simulate)?),
        (None, Some(kind)) => Some(resolve_objective(
            &RawObjective {
                kind,
                theta: default_theta(),
                loss_cost: None,
                grid: None,
                literal_plus: false,
                batch_range: None,
                b_feasible: None,
                root_method: RootMethod::default(),
                simulate: false,
            },
            None,
            overrides.simulate,
        )?),
        (None, None) => None,
    };
    if let Some(o) = &objective {
        if o.kind == ObjectiveKind::V2 && raw.workload.patience.is_none() {
            return Err(CliError::Input("the v2 objective needs workload.patience".into()));
        }
    }

    let sweep = raw
        .sweep
        .as_ref()
        .map(|s| -> Result<ResolvedSweep> {
            let values = s.values.values()?;
            if values.is_empty() {
                return Err(CliError::Input("sweep has no values".into()));
            }
            Ok(ResolvedSweep { parameter: s.parameter, values })
        })
        .transpose()?;

    let lambda = raw.workload.lambda;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(CliError::Input(format!("workload.lambda must be positive, got {lambda}")));
    }
    if let Some(t) = raw.workload.patience {
        if !(t.is_finite() && t > 0.0) {
            return Err(CliError::Input(format!("workload.patience must be positive, got {t}")));
        }
    }
    Ok(Resolved {
        lambda,
        distribution,
        patience: raw.workload.patience,
        latency,
        policy: raw.policy,
        objective,
        sim,
        sweep,
    })
}

fn resolve_objective(o: &RawObjective, kind: Option<ObjectiveKind>, simulate: bool) -> Result<Objective> {
    let grid = match &o.grid {
        Some(g) => g.values()?,
        None => tokenq_core::optimize::token_grid(100.0, 3000.0, 100.0)?,
    };
    let [lo, mut hi] = o.batch_range.unwrap_or(DEFAULT_BATCH_RANGE);
    if let Some(cap) = o.b_feasible {
        hi = hi.min(cap);
    }
    if lo == 0 || hi < lo {
        return Err(CliError::Input(format!("batch range [{lo}, {hi}] must satisfy 1 <= lo <= hi")));
    }
    Ok(Objective {
        kind: kind.unwrap_or(o.kind),
        theta: o.theta,
        loss_cost: o.loss_cost,
        grid,
        literal_plus: o.literal_plus,
        batch_range: [lo, hi],
        root_method: o.root_method,
        simulate: o.simulate || simulate,
    })
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn resolve_distribution(d: &RawDistribution, base: &Path) -> Result<TokenDistribution> {
    Ok(match d {
        RawDistribution::Deterministic { tokens } => TokenDistribution::Deterministic { tokens: *tokens },
        RawDistribution::Uniform { max } => TokenDistribution::Uniform { max: *max },
        RawDistribution::TruncatedGaussian { mean, sd } => {
            TokenDistribution::TruncatedGaussian { mean: *mean, sd: *sd }
        }
        RawDistribution::Lognormal { log_mean, log_sd } => {
            TokenDistribution::LogNormal { log_mean: *log_mean, log_sd: *log_sd }
        }
        RawDistribution::Exponential { mean } => TokenDistribution::Exponential { mean: *mean },
        RawDistribution::Empirical { csv, samples_file, samples, points } => {
            let given = [csv.is_some(), samples_file.is_some(), samples.is_some(), points.is_some()];
            if given.iter().filter(|&&g| g).count() != 1 {
                return Err(CliError::Input(
                    "empirical distribution needs exactly one of csv, samples_file, samples, points".into(),
                ));
            }
            let law = if let Some(p) = csv {
                Empirical::from_pairs(&normalized(io::read_token_pmf(&resolve_path(base, p))?)?)?
            } else if let Some(p) = samples_file {
                Empirical::from_samples(&io::read_samples(&resolve_path(base, p))?)?
            } else if let Some(s) = samples {
                Empirical::from_samples(s)?
            } else {
                Empirical::from_pairs(&normalized(points.clone().unwrap_or_default())?)?
            };
            TokenDistribution::Empirical(law)
        }
    })
}

// Probability columns are usually rounded; accept a total within 1e-6 of one
// and rescale.
fn normalized(mut pairs: Vec<(f64, f64)>) -> Result<Vec<(f64, f64)>> {
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if (total - 1.0).abs() > 1e-6 || total.is_nan() {
        return Err(CliError::Input(format!("probabilities sum to {total}, expected 1")));
    }
    for p in &mut pairs {
        p.1 /= total;
    }
    Ok(pairs)
}

fn resolve_latency(l: &RawLatency, base: &Path) -> Result<LatencyModel> {
    Ok(match l {
        RawLatency::Single { a, c } => LatencyModel::Single(SingleLatencyModel { a: *a, c: *c }),
        RawLatency::Batch { k1, k2, k3, k4 } => {
            LatencyModel::Batch(BatchLatencyModel { k1: *k1, k2: *k2, k3: *k3, k4: *k4 })
        }
        RawLatency::File { path } => {
            let path = resolve_path(base, path);
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let file: io::ModelFile =
                serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            file.model
        }
    })
}

impl Resolved {
    pub fn single_model(&self) -> Result<SingleLatencyModel> {
        match self.latency {
            Some(LatencyModel::Single(m)) => Ok(m),
            Some(LatencyModel::Batch(m)) => Ok(m.single()),
            None => Err(CliError::Input("this command needs a [latency] section".into())),
        }
    }

    pub fn batch_model(&self) -> Result<BatchLatencyModel> {
        match self.latency {
            Some(LatencyModel::Batch(m)) => Ok(m),
            Some(LatencyModel::Single(_)) => Err(CliError::Input("this command needs a batch latency model".into())),
            None => Err(CliError::Input("this command needs a [latency] section".into())),
        }
    }

    pub fn latency_model(&self) -> Result<LatencyModel> {
        self.latency.ok_or_else(|| CliError::Input("this command needs a [latency] section".into()))
    }

    /// The configured policy, or a single server without a token cap.
    pub fn policy_or_default(&self) -> Policy {
        self.policy.unwrap_or(Policy::SingleFcfs { n_max: None })
    }

    pub fn batch_range(&self) -> std::ops::RangeInclusive<u32> {
        let [lo, hi] = self.objective.as_ref().map(|o| o.batch_range).unwrap_or(DEFAULT_BATCH_RANGE);
        lo..=hi
    }

    pub fn root_method(&self) -> RootMethod {
        self.objective.as_ref().map(|o| o.root_method).unwrap_or_default()
    }

    pub fn sim_config(&self, lambda: f64, policy: Policy) -> Result<tokenq_core::sim::SimConfig> {
        let cfg = tokenq_core::sim::SimConfig {
            lambda,
            distribution: self.distribution.clone(),
            latency: self.latency_model()?,
            policy,
            patience: self.patience,
            warmup: self.sim.warmup,
            horizon: self.sim.horizon,
            seed: self.sim.seed,
            replications: self.sim.replications,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
[workload]
lambda = 0.025
distribution = { kind = "lognormal", log_mean = 7.0, log_sd = 0.7 }

[latency]
kind = "single"
a = 0.023
c = 0.19

[policy]
kind = "single_fcfs"
n_max = 1600

[sim]
seed = 9
"#;

    #[test]
    fn parses_toml_and_fills_defaults() {
        let raw = parse(BASIC, false).unwrap();
        let r = resolve(raw, Path::new("."), &Overrides::default(), None).unwrap();
        assert_eq!(r.sim.seed, 9);
        assert_eq!(r.sim.replications, 10);
        assert_eq!(r.policy, Some(Policy::SingleFcfs { n_max: Some(1600.0) }));
        assert_eq!(r.distribution, TokenDistribution::LogNormal { log_mean: 7.0, log_sd: 0.7 });
    }

    #[test]
    fn seed_precedence() {
        let raw = parse(BASIC, false).unwrap();
        let r = resolve(raw.clone(), Path::new("."), &Overrides::default(), Some(5)).unwrap();
        assert_eq!(r.sim.seed, 5);
        let o = Overrides { seed: Some(7), ..Default::default() };
        let r = resolve(raw, Path::new("."), &o, Some(5)).unwrap();
        assert_eq!(r.sim.seed, 7);
    }

    #[test]
    fn json_form_is_equivalent() {
        let json = r#"{"workload": {"lambda": 0.025, "distribution": {"kind": "lognormal", "log_mean": 7, "log_sd": 0.7}},
                       "latency": {"kind": "single", "a": 0.023, "c": 0.19},
                       "policy": {"kind": "single_fcfs", "n_max": 1600},
                       "sim": {"seed": 9}}"#;
        let a = resolve(parse(json, true).unwrap(), Path::new("."), &Overrides::default(), None).unwrap();
        let b = resolve(parse(BASIC, false).unwrap(), Path::new("."), &Overrides::default(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(
            parse("[workload]\nlambda = 1\nbogus = 2\ndistribution = { kind = \"uniform\", max = 5 }", false).is_err()
        );
        let raw = parse("[workload]\nlambda = -1\ndistribution = { kind = \"uniform\", max = 5 }", false).unwrap();
        assert!(resolve(raw, Path::new("."), &Overrides::default(), None).is_err());
        let raw = parse("[workload]\nlambda = 1\ndistribution = { kind = \"uniform\", max = -5 }", false).unwrap();
        assert!(matches!(resolve(raw, Path::new("."), &Overrides::default(), None), Err(CliError::Input(_))));
    }

    #[test]
    fn empirical_points_are_normalized() {
        let raw = parse(
            "[workload]\nlambda = 1\ndistribution = { kind = \"empirical\", points = [[10, 0.3333333], [20, 0.6666667]] }",
            false,
        )
        .unwrap();
        let r = resolve(raw, Path::new("."), &Overrides::default(), None).unwrap();
        assert!((r.distribution.mean() - 16.666_666_666).abs() < 1e-5);
    }

    #[test]
    fn feasible_batch_cap_trims_range() {
        let text = "[workload]\nlambda = 1\ndistribution = { kind = \"uniform\", max = 5 }\n\
                    [objective]\nkind = \"batch\"\nb_feasible = 49\n";
        let r = resolve(parse(text, false).unwrap(), Path::new("."), &Overrides::default(), None).unwrap();
        assert_eq!(r.batch_range(), 1..=49);
        let text = text.replace("49", "0");
        assert!(resolve(parse(&text, false).unwrap(), Path::new("."), &Overrides::default(), None).is_err());
    }

    #[test]
    fn grid_forms() {
        let g: Grid = serde_json::from_str(r#"{"start": 100, "end": 300, "step": 100}"#).unwrap();
        assert_eq!(g.values().unwrap(), vec![100.0, 200.0, 300.0]);
        let g: Grid = serde_json::from_str("[5, 6]").unwrap();
        assert_eq!(g.values().unwrap(), vec![5.0, 6.0]);
    }
}

//! Output-token distributions.
//!
//! Token counts are treated as nonnegative reals. Continuous laws integrate
//! where the discrete model would sum; empirical laws sum exactly.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::rand_core::RngCore;

use crate::quad::{self, ABS_TOL, REL_TOL};
use crate::rng::open01;
use crate::special::{norm_cdf, norm_pdf, norm_ppf, norm_sf};
use crate::{Error, Result};

/// Upper-tail mass left out when a continuous integral over `[0, inf)` is
/// cut at a quantile.
const TAIL_CUT: f64 = 1e-16;

/// Law of the number of tokens a request asks for.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum TokenDistribution {
    /// Every request asks for exactly `tokens`.
    Deterministic {
        tokens: f64,
    },
    /// Uniform on `[0, max]`.
    Uniform {
        max: f64,
    },
    /// Gaussian with the given mean and standard deviation, conditioned on
    /// being nonnegative.
    TruncatedGaussian {
        mean: f64,
        sd: f64,
    },
    /// `exp(Normal(log_mean, log_sd))`.
    LogNormal {
        log_mean: f64,
        log_sd: f64,
    },
    /// Exponential with the given mean.
    Exponential {
        mean: f64,
    },
    Empirical(Empirical),
}

/// A finite law on sorted, distinct token counts.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Empirical {
    values: Vec<f64>,
    probabilities: Vec<f64>,
    #[cfg_attr(feature = "serde", serde(skip))]
    cumulative: Vec<f64>,
}

impl Empirical {
    /// Builds a law from `(tokens, probability)` pairs. Pairs are sorted and
    /// ties merged; probabilities must sum to one within `1e-9`.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("empirical distribution needs at least one point"));
        }
        let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
        for &(v, p) in &sorted {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("token count {v} must be finite and nonnegative")));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::invalid(format!("probability {p} must be nonnegative")));
            }
        }
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = sorted.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}, expected 1")));
        }

        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut probabilities: Vec<f64> = Vec::with_capacity(sorted.len());
        for (v, p) in sorted {
            match values.last() {
                Some(&last) if last == v => *probabilities.last_mut().unwrap() += p,
                _ => {
                    values.push(v);
                    probabilities.push(p);
                }
            }
        }
        let mut cumulative = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        for &p in &probabilities {
            acc += p;
            cumulative.push(acc);
        }
        // Absorb the rounding so the last step is exactly one.
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(Self { values, probabilities, cumulative })
    }

    /// Builds the histogram of a raw sample, one entry per observation.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("sample list is empty"));
        }
        let w = 1.0 / samples.len() as f64;
        let pairs: Vec<(f64, f64)> = samples.iter().map(|&v| (v, w)).collect();
        let mut law = Self::from_pairs(&pairs)?;
        // Recompute from counts to avoid accumulating 1/n rounding.
        let n = samples.len() as f64;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut counts = Vec::with_capacity(law.values.len());
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            counts.push((j - i) as f64);
            i = j;
        }
        let mut acc = 0.0;
        for (k, c) in counts.iter().enumerate() {
            law.probabilities[k] = c / n;
            acc += c;
            law.cumulative[k] = acc / n;
        }
        Ok(law)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    fn cdf(&self, x: f64) -> f64 {
        let idx = self.values.partition_point(|&v| v <= x);
        if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        }
    }

    fn quantile(&self, p: f64) -> f64 {
        let idx = self.cumulative.partition_point(|&c| c < p);
        self.values[idx.min(self.values.len() - 1)]
    }

    fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.values.iter().zip(&self.probabilities).map(|(&v, &p)| p * f(v)).sum()
    }
}

impl TokenDistribution {
    pub fn deterministic(tokens: f64) -> Result<Self> {
        Self::Deterministic { tokens }.validated()
    }

    pub fn uniform(max: f64) -> Result<Self> {
        Self::Uniform { max }.validated()
    }

    pub fn truncated_gaussian(mean: f64, sd: f64) -> Result<Self> {
        Self::TruncatedGaussian { mean, sd }.validated()
    }

    pub fn lognormal(log_mean: f64, log_sd: f64) -> Result<Self> {
        Self::LogNormal { log_mean, log_sd }.validated()
    }

    pub fn exponential(mean: f64) -> Result<Self> {
        Self::Exponential { mean }.validated()
    }

    pub fn empirical(pairs: &[(f64, f64)]) -> Result<Self> {
        Empirical::from_pairs(pairs).map(Self::Empirical)
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    /// Checks the parameter constraints of each kind.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Deterministic { tokens } => tokens.is_finite() && tokens >= 0.0,
            Self::Uniform { max } => max.is_finite() && max > 0.0,
            Self::TruncatedGaussian { mean, sd } => mean.is_finite() && sd.is_finite() && sd > 0.0,
            Self::LogNormal { log_mean, log_sd } => log_mean.is_finite() && log_sd.is_finite() && log_sd > 0.0,
            Self::Exponential { mean } => mean.is_finite() && mean > 0.0,
            Self::Empirical(_) => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid distribution parameters: {self:?}")))
        }
    }

    /// Mass of the untruncated Gaussian above zero.
    fn tg_mass(mean: f64, sd: f64) -> f64 {
        norm_cdf(mean / sd)
    }

    /// `P(N <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        let x = x.max(0.0);
        match self {
            Self::Deterministic { tokens } => {
                if x >= *tokens {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Uniform { max } => (x / max).min(1.0),
            Self::TruncatedGaussian { mean, sd } => {
                let z = (x - mean) / sd;
                let mass = Self::tg_mass(*mean, *sd);
                if z < 0.0 {
                    // Lower side: difference of two small lower tails.
                    ((norm_cdf(z) - norm_cdf(-mean / sd)) / mass).max(0.0)
                } else {
                    1.0 - norm_sf(z) / mass
                }
            }
            Self::LogNormal { log_mean, log_sd } => {
                if x == 0.0 {
                    0.0
                } else {
                    norm_cdf((libm::log(x) - log_mean) / log_sd)
                }
            }
            Self::Exponential { mean } => -libm::expm1(-x / mean),
            Self::Empirical(e) => e.cdf(x),
        }
    }

    /// `P(N > x)`, computed without cancellation in the upper tail.
    pub fn sf(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match self {
            Self::TruncatedGaussian { mean, sd } => {
                let z = (x - mean) / sd;
                if z < 0.0 {
                    1.0 - self.cdf(x)
                } else {
                    norm_sf(z) / Self::tg_mass(*mean, *sd)
                }
            }
            Self::LogNormal { log_mean, log_sd } => {
                if x == 0.0 {
                    1.0
                } else {
                    norm_sf((libm::log(x) - log_mean) / log_sd)
                }
            }
            Self::Exponential { mean } => libm::exp(-x / mean),
            _ => 1.0 - self.cdf(x),
        }
    }

    /// Smallest `x` with `P(N <= x) >= p`.
    pub fn quantile(&self, p: f64) -> f64 {
        if p > 0.5 {
            return self.upper_quantile(1.0 - p);
        }
        match self {
            Self::Deterministic { tokens } => *tokens,
            Self::Uniform { max } => max * p,
            Self::TruncatedGaussian { mean, sd } => {
                let lower = norm_cdf(-mean / sd);
                (mean + sd * norm_ppf(lower + p * Self::tg_mass(*mean, *sd))).max(0.0)
            }
            Self::LogNormal { log_mean, log_sd } => libm::exp(log_mean + log_sd * norm_ppf(p)),
            Self::Exponential { mean } => -mean * libm::log1p(-p),
            Self::Empirical(e) => e.quantile(p),
        }
    }

    /// The `x` with `P(N > x) = q`, accurate for tiny `q`.
    pub fn upper_quantile(&self, q: f64) -> f64 {
        match self {
            Self::Deterministic { tokens } => *tokens,
            Self::Uniform { max } => max * (1.0 - q),
            Self::TruncatedGaussian { mean, sd } => (mean - sd * norm_ppf(q * Self::tg_mass(*mean, *sd))).max(0.0),
            Self::LogNormal { log_mean, log_sd } => libm::exp(log_mean - log_sd * norm_ppf(q)),
            Self::Exponential { mean } => -mean * libm::log(q),
            Self::Empirical(e) => e.quantile(1.0 - q),
        }
    }

    /// Largest possible value, if the support is bounded.
    pub fn support_max(&self) -> Option<f64> {
        match self {
            Self::Deterministic { tokens } => Some(*tokens),
            Self::Uniform { max } => Some(*max),
            Self::Empirical(e) => e.values.last().copied(),
            _ => None,
        }
    }

    /// `E[N]`.
    pub fn mean(&self) -> f64 {
        match self {
            Self::Deterministic { tokens } => *tokens,
            Self::Uniform { max } => 0.5 * max,
            Self::TruncatedGaussian { mean, sd } => {
                let alpha = -mean / sd;
                mean + sd * norm_pdf(alpha) / Self::tg_mass(*mean, *sd)
            }
            Self::LogNormal { log_mean, log_sd } => libm::exp(log_mean + 0.5 * log_sd * log_sd),
            Self::Exponential { mean } => *mean,
            Self::Empirical(e) => e.expect(|v| v),
        }
    }

    /// `E[N^2]`.
    pub fn second_moment(&self) -> f64 {
        match self {
            Self::Deterministic { tokens } => tokens * tokens,
            Self::Uniform { max } => max * max / 3.0,
            Self::TruncatedGaussian { mean, sd } => {
                let alpha = -mean / sd;
                let hazard = norm_pdf(alpha) / Self::tg_mass(*mean, *sd);
                let var = sd * sd * (1.0 + alpha * hazard - hazard * hazard);
                let m = mean + sd * hazard;
                var + m * m
            }
            Self::LogNormal { log_mean, log_sd } => libm::exp(2.0 * log_mean + 2.0 * log_sd * log_sd),
            Self::Exponential { mean } => 2.0 * mean * mean,
            Self::Empirical(e) => e.expect(|v| v * v),
        }
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (self.second_moment() - m * m).max(0.0)
    }

    /// `(E[min(N, n_max)], E[min(N, n_max)^2])`.
    ///
    /// Continuous laws use `E[min(N,n)] = int_0^n P(N>x) dx` and
    /// `E[min(N,n)^2] = int_0^n 2x P(N>x) dx`.
    pub fn clipped_moments(&self, n_max: f64) -> Result<(f64, f64)> {
        check_limit(n_max)?;
        match self {
            Self::Deterministic { tokens } => {
                let m = tokens.min(n_max);
                Ok((m, m * m))
            }
            Self::Uniform { max } => {
                if n_max >= *max {
                    Ok((0.5 * max, max * max / 3.0))
                } else {
                    let tail = 1.0 - n_max / max;
                    let m1 = n_max * n_max / (2.0 * max) + n_max * tail;
                    let m2 = n_max * n_max * n_max / (3.0 * max) + n_max * n_max * tail;
                    Ok((m1, m2))
                }
            }
            Self::Empirical(e) => {
                let m1 = e.expect(|v| v.min(n_max));
                let m2 = e.expect(|v| {
                    let c = v.min(n_max);
                    c * c
                });
                Ok((m1, m2))
            }
            _ => {
                let hi = n_max.min(self.upper_quantile(TAIL_CUT));
                let breaks = self.kink_hint(hi);
                let m1 = quad::integrate(|x| self.sf(x), 0.0, hi, &breaks, ABS_TOL, REL_TOL)?;
                let m2 = quad::integrate(|x| 2.0 * x * self.sf(x), 0.0, hi, &breaks, ABS_TOL, REL_TOL)?;
                Ok((m1, m2))
            }
        }
    }

    // Interior points worth splitting at: the bulk of the mass sits around
    // the median, and the integrand changes shape there.
    fn kink_hint(&self, hi: f64) -> Vec<f64> {
        [0.05, 0.5, 0.95].iter().map(|&p| self.quantile(p)).filter(|&x| x > 0.0 && x < hi).collect()
    }

    /// `E[max(N_1, ..., N_b)]` for `b` independent draws.
    ///
    /// Continuous laws are integrated in the probability domain: with
    /// `t = F(x)^b` the expectation is `int_0^1 Q(t^(1/b)) dt`, and the
    /// substitution `1 - t = exp(-s)` turns the heavy upper end into an
    /// exponentially damped integrand on `[0, inf)`.
    pub fn max_order_stat_mean(&self, b: u32) -> Result<f64> {
        if b == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if b == 1 {
            return Ok(self.mean());
        }
        let bf = b as f64;
        match self {
            Self::Deterministic { tokens } => Ok(*tokens),
            Self::Uniform { max } => Ok(max * bf / (bf + 1.0)),
            Self::Empirical(e) => {
                let mut prev = 0.0;
                let mut acc = 0.0;
                for (&v, &c) in e.values.iter().zip(&e.cumulative) {
                    let cur = libm::pow(c, bf);
                    acc += v * (cur - prev);
                    prev = cur;
                }
                Ok(acc)
            }
            _ => {
                let integrand = |s: f64| {
                    let e = libm::exp(-s);
                    // Upper-tail probability of a single draw at t = 1 - e.
                    let q = -libm::expm1(libm::log1p(-e) / bf);
                    self.upper_quantile(q) * e
                };
                quad::integrate(integrand, 0.0, 80.0, &[1.0, 5.0, 20.0], ABS_TOL, REL_TOL)
            }
        }
    }

    /// Mean utility when replies are cut at `n_max` tokens, a reply of `n`
    /// requested tokens being worth `min(1, n_max / n)`:
    /// `F(n_max) + n_max * E[1{N > n_max} / N]`.
    pub fn clipped_utility_mean(&self, n_max: f64) -> Result<f64> {
        check_limit(n_max)?;
        match self {
            Self::Deterministic { tokens } => Ok(if *tokens <= n_max { 1.0 } else { n_max / tokens }),
            Self::Uniform { max } => {
                if n_max >= *max {
                    Ok(1.0)
                } else {
                    let r = n_max / max;
                    Ok(r + r * libm::log(max / n_max))
                }
            }
            Self::Empirical(e) => Ok(e.expect(|v| if v <= n_max { 1.0 } else { n_max / v })),
            _ => {
                // Tail-probability domain: int_{x > n} f(x)/x dx = int_0^{S(n)} dq / Q_up(q).
                let tail = self.sf(n_max);
                if tail <= 0.0 {
                    return Ok(1.0);
                }
                let part = quad::integrate(|q| 1.0 / self.upper_quantile(q), 0.0, tail, &[], ABS_TOL * 1e-3, REL_TOL)?;
                Ok((1.0 - tail) + n_max * part)
            }
        }
    }

    /// One draw, consuming exactly one 64-bit word from `rng`.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = open01(rng);
        match self {
            Self::Deterministic { tokens } => *tokens,
            Self::Uniform { max } => max * u,
            Self::Empirical(e) => e.quantile(u),
            // Inverse transform through the upper quantile: exact in the tail.
            _ => self.upper_quantile(u),
        }
    }
}

fn check_limit(n_max: f64) -> Result<()> {
    if n_max >= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("token limit {n_max} must be at least 1")))
    }
}

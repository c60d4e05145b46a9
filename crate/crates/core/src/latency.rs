//! Linear latency models.
//!
//! A single request generating `n` tokens takes `a n + c` seconds. A padded
//! batch of `b` requests whose longest reply has `l` tokens takes
//! `k1 b + k2 + k3 b l + k4 l`: the first term pair is the prefill, the
//! second the per-step decode cost times the number of decode steps.

use alloc::format;
use alloc::vec::Vec;

use crate::dist::TokenDistribution;
use crate::lsq::least_squares;
use crate::{Error, Result};

/// Largest batch size probed when looking for the flattening point of the
/// expected maximum token count.
pub const MAX_REFERENCE_BATCH: u32 = 512;

/// Default upper end of the batch-size range an envelope is checked on.
pub const DEFAULT_ENVELOPE_CHECK: u32 = 128;

// Fitted coefficients this close to zero from below are rounding noise.
const SIGN_SLACK: f64 = 1e-9;

/// `S = a n + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SingleLatencyModel {
    /// Seconds per output token.
    pub a: f64,
    /// Fixed seconds per request.
    pub c: f64,
}

impl SingleLatencyModel {
    pub fn new(a: f64, c: f64) -> Result<Self> {
        let m = Self { a, c };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.is_finite() && self.a > 0.0 && self.c.is_finite() && self.c >= 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("single latency model needs a > 0, c >= 0: {self:?}")))
        }
    }

    pub fn service_time(&self, tokens: f64) -> f64 {
        self.a * tokens + self.c
    }
}

/// `H(b, l) = k1 b + k2 + k3 b l + k4 l`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchLatencyModel {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
}

impl BatchLatencyModel {
    pub fn new(k1: f64, k2: f64, k3: f64, k4: f64) -> Result<Self> {
        let m = Self { k1, k2, k3, k4 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.k1, self.k2, self.k3, self.k4].iter().all(|k| k.is_finite());
        if finite && self.k1 > 0.0 && self.k2 >= 0.0 && self.k3 >= 0.0 && self.k4 >= 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("batch latency model needs k1 > 0 and k2, k3, k4 >= 0: {self:?}")))
        }
    }

    /// Padded batch time for `b` requests whose longest reply is `l` tokens.
    pub fn service_time(&self, b: u32, l: f64) -> f64 {
        let b = b as f64;
        self.k1 * b + self.k2 + self.k3 * b * l + self.k4 * l
    }

    /// The single-request model this reduces to at `b = 1`.
    pub fn single(&self) -> SingleLatencyModel {
        SingleLatencyModel { a: self.k3 + self.k4, c: self.k1 + self.k2 }
    }

    /// Mean padded batch time `k1 b + k2 + (k3 b + k4) E[L(b)]`, where
    /// `L(b)` is the largest of `b` token counts.
    pub fn mean_batch_time(&self, d: &TokenDistribution, b: u32) -> Result<f64> {
        let l = d.max_order_stat_mean(b)?;
        Ok(self.service_time(b, l))
    }

    /// Batch time without padding: each reply leaves as soon as its own
    /// tokens are out and the decode step shrinks with the live batch.
    ///
    /// `counts` must be sorted ascending. Returns the total time and, for
    /// each request in that order, its completion offset from batch start.
    pub fn elastic_batch_time(&self, counts: &[f64]) -> Result<(f64, Vec<f64>)> {
        if counts.is_empty() {
            return Err(Error::invalid("elastic batch needs at least one request"));
        }
        if counts.iter().any(|&n| !(n.is_finite() && n >= 0.0)) {
            return Err(Error::invalid("token counts must be finite and nonnegative"));
        }
        if counts.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("token counts must be sorted ascending"));
        }
        let b = counts.len();
        let mut t = self.k1 * b as f64 + self.k2;
        let mut prev = 0.0;
        let mut offsets = Vec::with_capacity(b);
        for (i, &n) in counts.iter().enumerate() {
            let live = (b - i) as f64;
            t += (self.k3 * live + self.k4) * (n - prev);
            prev = n;
            offsets.push(t);
        }
        Ok((t, offsets))
    }

    /// Closed form of the elastic total: `k1 b + k2 + k3 sum(n) + k4 max(n)`.
    pub fn elastic_total(&self, counts: &[f64]) -> f64 {
        let b = counts.len() as f64;
        let sum: f64 = counts.iter().sum();
        let max = counts.iter().copied().fold(0.0, f64::max);
        self.k1 * b + self.k2 + self.k3 * sum + self.k4 * max
    }
}

/// `H(b) <= alpha b + beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinearEnvelope {
    pub alpha: f64,
    pub beta: f64,
}

impl LinearEnvelope {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 && beta.is_finite() && beta >= 0.0 {
            Ok(Self { alpha, beta })
        } else {
            Err(Error::invalid(format!("envelope needs alpha > 0, beta >= 0 (got {alpha}, {beta})")))
        }
    }

    pub fn at(&self, b: u32) -> f64 {
        self.alpha * b as f64 + self.beta
    }
}

/// A linear envelope together with how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Linearization {
    pub envelope: LinearEnvelope,
    /// Token count substituted for the batch maximum.
    pub l_bar: f64,
    /// Smallest batch size at which the expected maximum grows by under 1%
    /// per extra request (unbounded laws only).
    pub b_ref: Option<u32>,
    /// The envelope is verified for every `b` in `1..=b_check`.
    pub b_check: u32,
    /// `E[L(2 b_ref)] / E[L(b_ref)] > 1.05`: the maximum keeps growing, so
    /// the envelope is loose and padding cost rises with the batch size.
    pub heavy_tail: bool,
}

/// Linear envelope of the mean padded batch time, checked on `1..=b_check`.
///
/// Bounded laws use the support maximum for `L`. Unbounded laws use the
/// expected maximum at the larger of `b_ref` and `b_check`; the expected
/// maximum is nondecreasing in `b`, so that value dominates the whole
/// checked range.
pub fn linearize(m: &BatchLatencyModel, d: &TokenDistribution, b_check: u32) -> Result<Linearization> {
    if b_check == 0 {
        return Err(Error::invalid("envelope check range must include b = 1"));
    }
    let (l_bar, b_ref, heavy_tail) = match d.support_max() {
        Some(max) => (max, None, false),
        None => {
            let mut b = 1;
            let mut cur = d.max_order_stat_mean(1)?;
            loop {
                let next = d.max_order_stat_mean(b + 1)?;
                if next - cur < 0.01 * cur || b >= MAX_REFERENCE_BATCH {
                    break;
                }
                b += 1;
                cur = next;
            }
            let b_ref = b;
            let heavy = d.max_order_stat_mean(2 * b_ref)? / cur > 1.05;
            let l_bar = d.max_order_stat_mean(b_ref.max(b_check))?;
            (l_bar, Some(b_ref), heavy)
        }
    };
    let envelope = LinearEnvelope::new(m.k1 + m.k3 * l_bar, m.k2 + m.k4 * l_bar)?;
    for b in 1..=b_check {
        let mean_time = m.mean_batch_time(d, b)?;
        let bound = envelope.at(b);
        if mean_time > bound * (1.0 + 1e-12) {
            return Err(Error::EnvelopeViolation { batch_size: b, mean_time, envelope: bound });
        }
    }
    Ok(Linearization { envelope, l_bar, b_ref, b_check, heavy_tail })
}

/// A fitted model with its residual diagnostics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Fit<M> {
    pub model: M,
    pub residuals: Vec<f64>,
    pub max_abs_residual: f64,
}

fn clamp_sign(v: f64, scale: f64) -> f64 {
    if v < 0.0 && v.abs() <= SIGN_SLACK * scale.max(1.0) {
        0.0
    } else {
        v
    }
}

/// Ordinary least squares of latency on output tokens.
///
/// `points` are `(tokens, seconds)`; at least two distinct token counts are
/// needed.
pub fn fit_single(points: &[(f64, f64)]) -> Result<Fit<SingleLatencyModel>> {
    let first = points.first().ok_or_else(|| Error::invalid("no calibration points"))?.0;
    if points.iter().all(|p| p.0 == first) {
        return Err(Error::invalid("need at least two distinct token counts"));
    }
    let rows: Vec<[f64; 2]> = points.iter().map(|p| [p.0, 1.0]).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let [a, c] = least_squares(&rows, &y)?;
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let model = SingleLatencyModel::new(a, clamp_sign(c, scale))?;
    let residuals: Vec<f64> = points.iter().map(|&(n, t)| t - model.service_time(n)).collect();
    let max_abs_residual = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(Fit { model, residuals, max_abs_residual })
}

/// Least squares of batch latency on `(batch size, max tokens)`.
///
/// `points` are `(b, l, seconds)`. The four regressors `b, 1, b l, l` must
/// be linearly independent over the data.
pub fn fit_batch(points: &[(f64, f64, f64)]) -> Result<Fit<BatchLatencyModel>> {
    if points.iter().any(|p| p.0 < 1.0) {
        return Err(Error::invalid("batch sizes must be at least 1"));
    }
    let rows: Vec<[f64; 4]> = points.iter().map(|&(b, l, _)| [b, 1.0, b * l, l]).collect();
    let y: Vec<f64> = points.iter().map(|p| p.2).collect();
    let [k1, k2, k3, k4] = least_squares(&rows, &y)?;
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let model = BatchLatencyModel::new(k1, clamp_sign(k2, scale), clamp_sign(k3, scale), clamp_sign(k4, scale))?;
    let residuals: Vec<f64> =
        points.iter().map(|&(b, l, t)| t - (model.k1 * b + model.k2 + model.k3 * b * l + model.k4 * l)).collect();
    let max_abs_residual = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(Fit { model, residuals, max_abs_residual })
}

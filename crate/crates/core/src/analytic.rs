//! Closed-form delay and loss formulas.
//!
//! Every formula reports an unstable configuration as
//! [`Error::Unstable`] carrying the load, so sweeps can skip it.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

use crate::dist::TokenDistribution;
use crate::latency::{BatchLatencyModel, LinearEnvelope, SingleLatencyModel};
use crate::special::ln_gamma;
use crate::{Error, Result};

/// Steady-state M/G/1 waiting time.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Mg1Result {
    pub rho: f64,
    /// Mean time from arrival to service start, seconds.
    pub mean_wait: f64,
    pub stable: bool,
    pub mean_service: f64,
    pub service_second_moment: f64,
}

/// Pollaczek-Khinchine mean wait `lambda E[S^2] / (2 (1 - rho))`.
pub fn mg1_wait(lambda: f64, s_mean: f64, s_second_moment: f64) -> Result<Mg1Result> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("arrival rate {lambda} must be nonnegative")));
    }
    if !(s_mean >= 0.0 && s_second_moment.is_finite()) {
        return Err(Error::invalid("service moments must be finite and nonnegative"));
    }
    if s_second_moment < s_mean * s_mean * (1.0 - 1e-12) {
        return Err(Error::invalid("second moment is below the squared mean"));
    }
    let rho = lambda * s_mean;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    Ok(Mg1Result {
        rho,
        mean_wait: lambda * s_second_moment / (2.0 * (1.0 - rho)),
        stable: true,
        mean_service: s_mean,
        service_second_moment: s_second_moment,
    })
}

/// Service-time moments `(E[S], E[S^2])` of `a min(N, n_max) + c`.
pub fn clipped_service_moments(m: &SingleLatencyModel, d: &TokenDistribution, n_max: f64) -> Result<(f64, f64)> {
    let (n1, n2) = d.clipped_moments(n_max)?;
    let s1 = m.a * n1 + m.c;
    let var = (n2 - n1 * n1).max(0.0);
    Ok((s1, s1 * s1 + m.a * m.a * var))
}

/// M/G/1 wait when every reply is cut at `n_max` tokens.
pub fn clipped_mg1_wait(lambda: f64, m: &SingleLatencyModel, d: &TokenDistribution, n_max: f64) -> Result<Mg1Result> {
    let (s1, s2) = clipped_service_moments(m, d, n_max)?;
    mg1_wait(lambda, s1, s2)
}

/// Loss and wait of a single-server queue whose customers leave after
/// waiting `tau` seconds without service.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ImpatienceComponent {
    /// Long-run fraction of customers that leave unserved.
    pub loss_fraction: f64,
    /// Mean time in queue over served and lost customers.
    pub mean_wait_all: f64,
}

/// Blend of the deterministic- and exponential-service components.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ImpatienceResult {
    pub loss_fraction: f64,
    pub mean_wait_all: f64,
    pub mean_wait_served: f64,
    /// Squared coefficient of variation of the service time.
    pub scv: f64,
    pub deterministic: ImpatienceComponent,
    pub exponential: ImpatienceComponent,
}

fn check_patience(lambda: f64, s_mean: f64, tau: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("arrival rate {lambda} must be positive")));
    }
    if !(s_mean.is_finite() && s_mean > 0.0) {
        return Err(Error::invalid(format!("mean service time {s_mean} must be positive")));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(format!("patience {tau} must be positive")));
    }
    Ok(())
}

// With deterministic patience and FCFS, an arrival is lost exactly when the
// workload it finds exceeds tau. Write the workload distribution on [0, tau]
// as P0 * A(x), with A(0) = 1. Admitted work balances server busy time,
// 1 - P0 = lambda E[S] (1 - pi) with 1 - pi = P0 A(tau), giving
//   P0 = 1 / (1 + rho A(tau)),  pi = 1 - P0 A(tau),
//   E[min(V, tau)] = tau - P0 * int_0^tau A(x) dx.
fn component_from_workload(rho: f64, tau: f64, a_tau: f64, a_int: f64) -> Result<ImpatienceComponent> {
    if !(a_tau.is_finite() && a_int.is_finite() && a_tau >= 1.0) {
        return Err(Error::numerical("workload distribution is not finite"));
    }
    let p0 = 1.0 / (1.0 + rho * a_tau);
    let loss = (1.0 - p0 * a_tau).clamp(0.0, 1.0);
    let wait = (tau - p0 * a_int).clamp(0.0, tau);
    Ok(ImpatienceComponent { loss_fraction: loss, mean_wait_all: wait })
}

/// Exact M/M/1 queue with deterministic patience `tau`.
///
/// Here `A(x) = 1 + lambda (e^{(lambda - mu) x} - 1) / (lambda - mu)`.
pub fn mm1_deterministic_patience(lambda: f64, s_mean: f64, tau: f64) -> Result<ImpatienceComponent> {
    check_patience(lambda, s_mean, tau)?;
    let mu = 1.0 / s_mean;
    let delta = lambda - mu;
    let dt = delta * tau;
    let a_tau = if dt == 0.0 { 1.0 + lambda * tau } else { 1.0 + lambda * libm::expm1(dt) / delta };
    // int_0^tau A = tau + lambda/delta * (expm1(delta tau)/delta - tau)
    let a_int = if dt.abs() < 1e-4 {
        tau + lambda * tau * tau * (0.5 + dt / 6.0 + dt * dt / 24.0 + dt * dt * dt / 120.0)
    } else {
        tau + lambda / delta * (libm::expm1(dt) / delta - tau)
    };
    component_from_workload(lambda * s_mean, tau, a_tau, a_int)
}

/// Exact M/D/1 queue with deterministic patience `tau`.
///
/// On `[0, tau]` the workload law solves `A'(x) = lambda (A(x) - A(x - D))`,
/// whose solution is the finite alternating sum
/// `A(x) = sum_{k <= x/D} (-lambda (x - kD))^k e^{lambda (x - kD)} / k!`.
/// When the patience spans many service times the sum cancels badly, and
/// the equation is integrated on a grid instead.
pub fn md1_deterministic_patience(lambda: f64, s_mean: f64, tau: f64) -> Result<ImpatienceComponent> {
    check_patience(lambda, s_mean, tau)?;
    let (a_tau, a_int) = match md1_workload_series(lambda, s_mean, tau) {
        Some(v) => v,
        None => md1_workload_grid(lambda, s_mean, tau),
    };
    component_from_workload(lambda * s_mean, tau, a_tau, a_int)
}

// `(A(tau), int_0^tau A)` from the alternating sum, or None when more than
// about half the digits cancel.
fn md1_workload_series(lambda: f64, d: f64, tau: f64) -> Option<(f64, f64)> {
    let kmax = libm::floor(tau / d) as usize;
    if kmax > 2_000 {
        return None;
    }
    let mut a_tau = 0.0;
    let mut a_int = 0.0;
    let mut magnitude = 0.0;
    for k in 0..=kmax {
        let y = lambda * (tau - k as f64 * d);
        if y < 0.0 {
            break;
        }
        // term_k = (-y)^k e^y / k!, and int_0^Y (-y)^k e^y / k! dy
        //        = e^Y sum_{j <= k} (-Y)^j / j! - 1.
        let ln_mag = if y > 0.0 { k as f64 * libm::log(y) + y - ln_gamma(k as f64 + 1.0) } else { f64::NEG_INFINITY };
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let term = if k == 0 { libm::exp(y) } else { sign * libm::exp(ln_mag) };
        a_tau += term;
        magnitude += term.abs();

        let mut partial = 0.0;
        let mut pow = 1.0;
        for j in 0..=k {
            if j > 0 {
                pow *= -y / j as f64;
            }
            partial += pow;
        }
        a_int += (libm::exp(y) * partial - 1.0) / lambda;
    }
    if magnitude * 1e-16 > 1e-8 * a_tau.abs() {
        None
    } else {
        Some((a_tau, a_int))
    }
}

// Integral form A(x) = 1 + lambda int_{max(0, x - D)}^x A, stepped with the
// trapezoid rule; the lagged integral is read off a cubic Hermite
// interpolant of I = int A (whose derivative A is known at the nodes).
// Two grid sizes are combined by Richardson extrapolation.
fn md1_workload_grid(lambda: f64, d: f64, tau: f64) -> (f64, f64) {
    let per_service = 400.0;
    let n = libm::ceil((tau / d * per_service).clamp(2_000.0, 2_000_000.0)) as usize;
    let coarse = md1_grid_pass(lambda, d, tau, n);
    let fine = md1_grid_pass(lambda, d, tau, 2 * n);
    ((4.0 * fine.0 - coarse.0) / 3.0, (4.0 * fine.1 - coarse.1) / 3.0)
}

fn md1_grid_pass(lambda: f64, d: f64, tau: f64, n: usize) -> (f64, f64) {
    let h = tau / n as f64;
    let mut a = Vec::with_capacity(n + 1);
    let mut int = Vec::with_capacity(n + 1);
    a.push(1.0);
    int.push(0.0);
    let lagged = |a: &[f64], int: &[f64], x: f64| -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let i = ((x / h) as usize).min(a.len() - 2);
        let t = x / h - i as f64;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * int[i]
            + (t3 - 2.0 * t2 + t) * h * a[i]
            + (-2.0 * t3 + 3.0 * t2) * int[i + 1]
            + (t3 - t2) * h * a[i + 1]
    };
    for j in 1..=n {
        let x = j as f64 * h;
        let lag = lagged(&a, &int, x - d);
        let prev_a = a[j - 1];
        let prev_i = int[j - 1];
        let aj = (1.0 + lambda * (prev_i + 0.5 * h * prev_a - lag)) / (1.0 - 0.5 * lambda * h);
        a.push(aj);
        int.push(prev_i + 0.5 * h * (prev_a + aj));
    }
    (a[n], int[n])
}

/// Combines two components with weight `scv` on the exponential one and
/// solves `E[W_q] = tau pi + E[W_qs] (1 - pi)` for the served-customer wait.
pub fn blend_components(
    scv: f64,
    deterministic: ImpatienceComponent,
    exponential: ImpatienceComponent,
    tau: f64,
) -> Result<ImpatienceResult> {
    if !(0.0..=1.0).contains(&scv) {
        return Err(Error::ApproximationDomain { scv });
    }
    let loss = (1.0 - scv) * deterministic.loss_fraction + scv * exponential.loss_fraction;
    let wait = (1.0 - scv) * deterministic.mean_wait_all + scv * exponential.mean_wait_all;
    if loss >= 1.0 {
        return Err(Error::numerical("every customer is lost"));
    }
    Ok(ImpatienceResult {
        loss_fraction: loss,
        mean_wait_all: wait,
        mean_wait_served: served_wait(wait, loss, tau),
        scv,
        deterministic,
        exponential,
    })
}

/// `E[W_qs] = (E[W_q] - tau pi) / (1 - pi)`.
pub fn served_wait(mean_wait_all: f64, loss_fraction: f64, tau: f64) -> f64 {
    (mean_wait_all - tau * loss_fraction) / (1.0 - loss_fraction)
}

/// Loss fraction and waits for a single server with patience `tau`, from
/// the first two service-time moments.
pub fn impatience_blend(lambda: f64, s_mean: f64, s_second_moment: f64, tau: f64) -> Result<ImpatienceResult> {
    check_patience(lambda, s_mean, tau)?;
    let scv = (s_second_moment - s_mean * s_mean) / (s_mean * s_mean);
    if !(0.0..=1.0).contains(&scv) {
        return Err(Error::ApproximationDomain { scv });
    }
    let det = md1_deterministic_patience(lambda, s_mean, tau)?;
    let exp = mm1_deterministic_patience(lambda, s_mean, tau)?;
    blend_components(scv, det, exp, tau)
}

/// Upper bounds on the mean wait under dynamic batching.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct BoundResult {
    pub phi0: f64,
    pub phi1: f64,
    pub phi: f64,
}

/// Mean-wait bounds for a server that takes every waiting request as one
/// batch whose time is at most `alpha b + beta`:
///
/// `phi0 = lambda (alpha + beta)^2 / (2 (1 - lambda^2 alpha^2))`,
/// `phi1 = (lambda alpha beta + lambda alpha^2 + beta) / (2 (1 - lambda^2 alpha^2))`.
pub fn dynamic_batch_bound(lambda: f64, env: &LinearEnvelope) -> Result<BoundResult> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("arrival rate {lambda} must be nonnegative")));
    }
    let (a, b) = (env.alpha, env.beta);
    let load = lambda * a;
    if load >= 1.0 {
        return Err(Error::Unstable { rho: load });
    }
    let denom = 2.0 * (1.0 - load * load);
    let phi0 = lambda * (a + b) * (a + b) / denom;
    let phi1 = (lambda * a * b + lambda * a * a + b) / denom;
    Ok(BoundResult { phi0, phi1, phi: phi0.min(phi1) })
}

/// How the roots inside the unit disk are obtained for the fixed-batch
/// formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RootMethod {
    /// 20-term Lagrange series, the classic truncated form.
    Series20,
    /// Series value polished by fixed-point iteration.
    #[default]
    Refined,
}

const SERIES_TERMS: u32 = 20;

fn check_fixed(lambda: f64, b: u32, h: f64) -> Result<f64> {
    if b == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("arrival rate {lambda} must be positive")));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("batch time {h} must be positive")));
    }
    let load = lambda * h / b as f64;
    if load >= 1.0 {
        return Err(Error::Unstable { rho: load });
    }
    Ok(load)
}

fn root_of_unity(k: u32, b: u32) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI * k as f64 / b as f64)
}

/// Truncated series `Z_k = sum_{m=1}^{20} c_m w_k^m` for `k = 1..b-1`, with
/// `c_m = e^{-lambda H m / b} (lambda H m)^{m-1} / (b^{m-1} m!)`.
pub fn series_roots(lambda: f64, b: u32, h: f64) -> Result<Vec<Complex64>> {
    let load = check_fixed(lambda, b, h)?;
    let coeffs: Vec<f64> = (1..=SERIES_TERMS)
        .map(|m| {
            let mf = m as f64;
            // (lambda H m / b)^{m-1} e^{-m lambda H / b} / m!
            libm::exp(-load * mf + (mf - 1.0) * libm::log(load * mf) - ln_gamma(mf + 1.0))
        })
        .collect();
    Ok((1..b)
        .map(|k| {
            let w = root_of_unity(k, b);
            let mut pow = Complex64::new(1.0, 0.0);
            let mut z = Complex64::new(0.0, 0.0);
            for c in &coeffs {
                pow *= w;
                z += pow * c;
            }
            z
        })
        .collect())
}

/// Roots of `z^b = e^{lambda H (z - 1)}` inside the unit disk, other than
/// `z = 1`, refined by `z <- w_k exp(lambda H (z - 1) / b)` from the series
/// value until the residual is below `1e-12`.
pub fn refine_roots(lambda: f64, b: u32, h: f64) -> Result<Vec<Complex64>> {
    let load = check_fixed(lambda, b, h)?;
    let seeds = series_roots(lambda, b, h)?;
    let mut roots = Vec::with_capacity(seeds.len());
    for (i, seed) in seeds.into_iter().enumerate() {
        let w = root_of_unity(i as u32 + 1, b);
        let map = |z: Complex64| w * (load * (z - 1.0)).exp();
        let mut z = seed;
        let mut converged = false;
        for _ in 0..200 {
            let next = map(z);
            z = next;
            if (z - map(z)).norm() < 1e-12 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::numerical(format!("root {} did not converge", i + 1)));
        }
        if z.norm() >= 1.0 {
            return Err(Error::numerical(format!("root {} left the unit disk", i + 1)));
        }
        roots.push(z);
    }
    Ok(roots)
}

/// Mean delay of the M/D^b/1 queue: the server waits for `b` requests and
/// serves them together in `h` seconds.
///
/// `E = (1/lambda) [ (b - (b - lambda H)^2) / (2 (b - lambda H)) + sum_k 1/(1 - Z_k) ]`.
///
/// At `b = 1` this reduces to `H (2 - lambda H) / (2 (1 - lambda H))`, the
/// M/D/1 wait plus the service time.
pub fn fixed_batch_delay(lambda: f64, b: u32, h: f64, method: RootMethod) -> Result<f64> {
    check_fixed(lambda, b, h)?;
    let roots = match method {
        RootMethod::Series20 => series_roots(lambda, b, h)?,
        RootMethod::Refined => refine_roots(lambda, b, h)?,
    };
    let bf = b as f64;
    let slack = bf - lambda * h;
    let mut total = Complex64::new((bf - slack * slack) / (2.0 * slack), 0.0);
    for z in roots {
        total += (Complex64::new(1.0, 0.0) - z).inv();
    }
    let total = total / lambda;
    if total.im.abs() > 1e-6 {
        return Err(Error::numerical(format!("imaginary residue {} in the delay", total.im)));
    }
    Ok(total.re)
}

/// Shape of a throughput curve over the swept batch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "shape"))]
pub enum CurveShape {
    /// Strictly increasing across the whole range.
    Increasing,
    /// Maximum strictly inside the range.
    InteriorMaximum {
        b: u32,
    },
    Other,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ThroughputCurve {
    /// `(b, requests per second)`.
    pub points: Vec<(u32, f64)>,
    pub shape: CurveShape,
    pub argmax: u32,
}

/// Batch service rate `mu(b) = b / E[H(b)]` over `batches`.
pub fn throughput_curve(
    m: &BatchLatencyModel,
    d: &TokenDistribution,
    batches: impl IntoIterator<Item = u32>,
) -> Result<ThroughputCurve> {
    let mut points = Vec::new();
    for b in batches {
        let h = m.mean_batch_time(d, b)?;
        points.push((b, b as f64 / h));
    }
    if points.is_empty() {
        return Err(Error::invalid("batch range is empty"));
    }
    let (mut best_i, mut best) = (0, points[0].1);
    for (i, &(_, mu)) in points.iter().enumerate() {
        if mu > best {
            best = mu;
            best_i = i;
        }
    }
    let increasing = points.windows(2).all(|w| w[1].1 > w[0].1);
    let shape = if increasing {
        CurveShape::Increasing
    } else if best_i > 0 && best_i + 1 < points.len() {
        CurveShape::InteriorMaximum { b: points[best_i].0 }
    } else {
        CurveShape::Other
    };
    Ok(ThroughputCurve { argmax: points[best_i].0, points, shape })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad;

    #[test]
    fn textbook_queues() {
        let mm1 = mg1_wait(0.5, 1.0, 2.0).unwrap();
        assert!((mm1.mean_wait - 1.0).abs() < 1e-12);
        assert!((mm1.rho - 0.5).abs() < 1e-15);
        let md1 = mg1_wait(0.5, 1.0, 1.0).unwrap();
        assert!((md1.mean_wait - 0.5).abs() < 1e-12);
        assert!(mg1_wait(1e-9, 1.0, 1.0).unwrap().mean_wait < 1e-8);
        assert!(matches!(mg1_wait(1.0, 1.0, 1.0), Err(Error::Unstable { rho }) if rho == 1.0));
    }

    #[test]
    fn clipped_two_point_law() {
        let d = TokenDistribution::empirical(&[(1.0, 0.5), (3.0, 0.5)]).unwrap();
        let m = SingleLatencyModel::new(1.0, 0.0).unwrap();
        let r = clipped_mg1_wait(0.25, &m, &d, 2.0).unwrap();
        assert!((r.mean_service - 1.5).abs() < 1e-15);
        assert!((r.service_second_moment - 2.5).abs() < 1e-15);
        assert!((r.rho - 0.375).abs() < 1e-15);
        assert!((r.mean_wait - 0.5).abs() < 1e-15);
    }

    #[test]
    fn clipped_deterministic_is_md1() {
        let d = TokenDistribution::deterministic(100.0).unwrap();
        let m = SingleLatencyModel::new(0.01, 0.5).unwrap();
        let r = clipped_mg1_wait(0.4, &m, &d, 500.0).unwrap();
        let s = 1.5;
        let rho = 0.4 * s;
        assert!((r.mean_wait - rho * s / (2.0 * (1.0 - rho))).abs() < 1e-12);
    }

    #[test]
    fn served_wait_algebra() {
        assert!((served_wait(20.0, 0.2, 60.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn blend_endpoints() {
        let det = md1_deterministic_patience(0.04, 20.0, 60.0).unwrap();
        let exp = mm1_deterministic_patience(0.04, 20.0, 60.0).unwrap();
        let at_one = blend_components(1.0, det, exp, 60.0).unwrap();
        assert_eq!(at_one.loss_fraction, exp.loss_fraction);
        assert_eq!(at_one.mean_wait_all, exp.mean_wait_all);
        let at_zero = blend_components(0.0, det, exp, 60.0).unwrap();
        assert_eq!(at_zero.loss_fraction, det.loss_fraction);
        assert_eq!(at_zero.mean_wait_all, det.mean_wait_all);
        let mid = blend_components(0.3, det, exp, 60.0).unwrap();
        assert!((mid.loss_fraction - (0.7 * det.loss_fraction + 0.3 * exp.loss_fraction)).abs() < 1e-15);
        let check = 60.0 * mid.loss_fraction + mid.mean_wait_served * (1.0 - mid.loss_fraction);
        assert!((check - mid.mean_wait_all).abs() < 1e-9);
        assert!(matches!(blend_components(1.2, det, exp, 60.0), Err(Error::ApproximationDomain { .. })));
        assert!(matches!(impatience_blend(0.04, 20.0, 1000.0, 60.0), Err(Error::ApproximationDomain { .. })));
    }

    #[test]
    fn infinite_patience_limits() {
        // Patience far beyond any realistic wait recovers M/M/1 and M/D/1.
        let exp = mm1_deterministic_patience(0.5, 1.0, 200.0).unwrap();
        assert!(exp.loss_fraction < 1e-12);
        assert!((exp.mean_wait_all - 1.0).abs() < 1e-9);
        let det = md1_deterministic_patience(0.5, 1.0, 15.0).unwrap();
        assert!(det.loss_fraction < 1e-6);
        assert!((det.mean_wait_all - 0.5).abs() < 1e-5, "{det:?}");
    }

    #[test]
    fn mm1_patience_near_critical_load() {
        // delta -> 0 takes the series branch; must agree with a tiny offset.
        let a = mm1_deterministic_patience(1.0, 1.0, 5.0).unwrap();
        let b = mm1_deterministic_patience(1.0, 1.0 - 1e-7, 5.0).unwrap();
        assert!((a.loss_fraction - b.loss_fraction).abs() < 1e-6);
        assert!((a.mean_wait_all - b.mean_wait_all).abs() < 1e-6);
        // At rho = 1: A(x) = 1 + x, P0 = 1/(2 + tau), pi = 1/(2 + tau).
        assert!((a.loss_fraction - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn md1_workload_integral_matches_quadrature() {
        // A(x) from the alternating sum, integrated numerically.
        let (lambda, d, tau) = (0.7, 1.3, 4.0);
        let a = |x: f64| {
            let mut s = 0.0;
            let mut k = 0;
            while k as f64 * d <= x {
                let y = lambda * (x - k as f64 * d);
                s += libm::pow(-y, k as f64) * libm::exp(y) / libm::exp(ln_gamma(k as f64 + 1.0));
                k += 1;
            }
            s
        };
        let int = quad::integrate(a, 0.0, tau, &[1.3, 2.6, 3.9], 1e-13, 1e-13).unwrap();
        let rho = lambda * d;
        let p0 = 1.0 / (1.0 + rho * a(tau));
        let c = md1_deterministic_patience(lambda, d, tau).unwrap();
        assert!((c.loss_fraction - (1.0 - p0 * a(tau))).abs() < 1e-12);
        assert!((c.mean_wait_all - (tau - p0 * int)).abs() < 1e-10);
    }

    #[test]
    fn md1_grid_agrees_with_series() {
        for &(lambda, d, tau) in &[(0.7, 1.3, 4.0), (0.04, 30.0, 60.0), (1.5, 1.0, 12.0), (0.3, 2.0, 25.0)] {
            let (s_tau, s_int) = md1_workload_series(lambda, d, tau).unwrap();
            let (g_tau, g_int) = md1_workload_grid(lambda, d, tau);
            assert!((g_tau - s_tau).abs() < 1e-6 * s_tau, "{lambda} {d} {tau}: {g_tau} vs {s_tau}");
            assert!((g_int - s_int).abs() < 1e-6 * s_int);
        }
        // Long patience: the series gives up, the grid carries on.
        assert!(md1_workload_series(1.448, 0.1, 16.23).is_none());
        let c = md1_deterministic_patience(1.448, 0.1, 16.23).unwrap();
        let rho: f64 = 0.1448;
        // Patience of 160 service times at light load: the infinite-patience
        // M/D/1 wait with no losses.
        assert!(c.loss_fraction < 1e-12);
        assert!((c.mean_wait_all - rho * 0.1 / (2.0 * (1.0 - rho))).abs() < 1e-7);
    }

    #[test]
    fn bound_examples() {
        let env = LinearEnvelope::new(0.1, 1.0).unwrap();
        let r = dynamic_batch_bound(1.0, &env).unwrap();
        assert!((r.phi0 - 1.21 / 1.98).abs() < 1e-12);
        assert!((r.phi1 - 1.11 / 1.98).abs() < 1e-12);
        assert_eq!(r.phi, r.phi1);
        let z = dynamic_batch_bound(0.0, &env).unwrap();
        assert_eq!(z.phi0, 0.0);
        assert_eq!(z.phi, 0.0);
        assert!(matches!(dynamic_batch_bound(10.0, &env), Err(Error::Unstable { .. })));
    }

    #[test]
    fn fixed_batch_single_reduces_to_md1_sojourn() {
        for method in [RootMethod::Series20, RootMethod::Refined] {
            let v = fixed_batch_delay(0.5, 1, 1.0, method).unwrap();
            assert!((v - 1.5).abs() < 1e-12);
            for &(l, h) in &[(0.1, 2.0), (0.9, 1.0), (3.0, 0.2)] {
                let rho: f64 = l * h;
                let closed = h * (2.0 - rho) / (2.0 * (1.0 - rho));
                assert!((fixed_batch_delay(l, 1, h, method).unwrap() - closed).abs() < 1e-9);
            }
        }
        assert!(matches!(fixed_batch_delay(1.0, 2, 2.0, RootMethod::Refined), Err(Error::Unstable { .. })));
    }

    #[test]
    fn refined_roots_solve_the_root_equation() {
        for &(b, load) in &[(2u32, 0.5), (4, 0.3), (8, 0.9), (16, 0.6), (64, 0.95)] {
            let h = 1.0;
            let lambda = load * b as f64 / h;
            let roots = refine_roots(lambda, b, h).unwrap();
            assert_eq!(roots.len(), b as usize - 1);
            for (k, z) in roots.iter().enumerate() {
                let w = root_of_unity(k as u32 + 1, b);
                let resid = (z - w * (lambda * h * (z - 1.0) / b as f64).exp()).norm();
                assert!(resid < 1e-12);
                assert!(z.norm() < 1.0);
            }
        }
    }

    #[test]
    fn refined_real_root_matches_bisection() {
        // b = 2, lambda H = 1: the k = 1 root is real and solves z = -e^{(z-1)/2}.
        let roots = refine_roots(1.0, 2, 1.0).unwrap();
        let z = roots[0];
        assert!(z.im.abs() < 1e-14);
        let g = |z: f64| z + libm::exp((z - 1.0) / 2.0);
        let (mut lo, mut hi) = (-1.0, 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(z.re > -1.0 && z.re < 0.0);
        assert!((z.re - 0.5 * (lo + hi)).abs() < 1e-12);
    }

    #[test]
    fn series_close_to_refined_at_moderate_load() {
        // The 20-term truncation error grows like (load e^(1-load))^20, so
        // agreement to 1e-4 only holds up to a load of about 0.4.
        for &(b, load) in &[(2u32, 0.3), (4, 0.4), (8, 0.4), (16, 0.35), (32, 0.4)] {
            let lambda = load * b as f64;
            let s = series_roots(lambda, b, 1.0).unwrap();
            let r = refine_roots(lambda, b, 1.0).unwrap();
            for (x, y) in s.iter().zip(&r) {
                assert!((x - y).norm() < 1e-4, "b={b} load={load}");
            }
        }
    }

    #[test]
    fn throughput_shapes() {
        let k = BatchLatencyModel::new(0.01, 0.1, 0.0002, 0.0008).unwrap();
        let det = TokenDistribution::deterministic(500.0).unwrap();
        let c = throughput_curve(&k, &det, 1..=64).unwrap();
        assert_eq!(c.shape, CurveShape::Increasing);
        let ln = TokenDistribution::lognormal(7.0, 0.7).unwrap();
        let c = throughput_curve(&k, &ln, 1..=128).unwrap();
        assert!(matches!(c.shape, CurveShape::InteriorMaximum { .. }));
        assert!(throughput_curve(&k, &det, 1..1).is_err());
    }
}

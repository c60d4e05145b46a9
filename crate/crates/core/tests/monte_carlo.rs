// Sampling checks of the distribution routines against their own draws.

use tokenq_core::dist::TokenDistribution;
use tokenq_core::rng;

const DRAWS: usize = 1_000_000;

fn laws() -> Vec<(&'static str, TokenDistribution)> {
    vec![
        ("uniform", TokenDistribution::Uniform { max: 2000.0 }),
        ("truncated_gaussian", TokenDistribution::TruncatedGaussian { mean: 800.0, sd: 20.0 }),
        ("truncated_gaussian_wide", TokenDistribution::TruncatedGaussian { mean: 300.0, sd: 400.0 }),
        ("lognormal", TokenDistribution::LogNormal { log_mean: 7.0, log_sd: 0.7 }),
        ("exponential", TokenDistribution::Exponential { mean: 500.0 }),
        ("empirical", TokenDistribution::empirical(&[(50.0, 0.2), (400.0, 0.5), (1800.0, 0.3)]).unwrap()),
    ]
}

#[test]
fn sample_means_within_three_standard_errors() {
    for (i, (name, d)) in laws().into_iter().enumerate() {
        let mut r = rng::stream(100 + i as u64, rng::TOKEN_STREAM);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..DRAWS {
            let x = d.sample(&mut r);
            s1 += x;
            s2 += x * x;
        }
        let n = DRAWS as f64;
        let mean = s1 / n;
        let se = (d.variance() / n).sqrt();
        assert!((mean - d.mean()).abs() <= 3.0 * se, "{name}: {mean} vs {}", d.mean());
        let m2 = s2 / n;
        assert!((m2 / d.second_moment() - 1.0).abs() < 0.01, "{name}: second moment");
    }
}

#[test]
fn clipped_moments_match_sampling() {
    for (i, (name, d)) in laws().into_iter().enumerate() {
        for &cap in &[300.0, 800.0, 1600.0] {
            let mut r = rng::stream(200 + i as u64, rng::TOKEN_STREAM);
            let (mut s1, mut s2, mut u) = (0.0, 0.0, 0.0);
            for _ in 0..DRAWS {
                let x: f64 = d.sample(&mut r);
                let c = x.min(cap);
                s1 += c;
                s2 += c * c;
                u += if x <= cap { 1.0 } else { cap / x };
            }
            let n = DRAWS as f64;
            let (m1, m2) = d.clipped_moments(cap).unwrap();
            assert!((s1 / n / m1 - 1.0).abs() < 0.002, "{name} cap {cap}: {} vs {m1}", s1 / n);
            assert!((s2 / n / m2 - 1.0).abs() < 0.004, "{name} cap {cap}: {} vs {m2}", s2 / n);
            let util = d.clipped_utility_mean(cap).unwrap();
            assert!((u / n / util - 1.0).abs() < 0.002, "{name} cap {cap}: utility");
        }
    }
}

#[test]
fn batch_maxima_match_sampling() {
    for (i, (name, d)) in laws().into_iter().enumerate() {
        for &b in &[2u32, 8, 32] {
            let batches = 1_000_000 / b as usize * 4;
            let mut r = rng::stream(300 + i as u64, rng::TOKEN_STREAM);
            let mut acc = 0.0;
            for _ in 0..batches {
                let mut m = 0.0f64;
                for _ in 0..b {
                    m = m.max(d.sample(&mut r));
                }
                acc += m;
            }
            let mc = acc / batches as f64;
            let exact = d.max_order_stat_mean(b).unwrap();
            assert!((mc / exact - 1.0).abs() < 0.005, "{name} b={b}: {mc} vs {exact}");
        }
    }
}

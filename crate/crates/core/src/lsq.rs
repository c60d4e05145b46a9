// Small dense least squares by Householder QR.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Solves `min ||X beta - y||` for a tall design with `K` columns.
///
/// Columns are scaled to unit norm before factorization; a diagonal entry of
/// `R` below `1e-10` marks the design as rank deficient.
pub(crate) fn least_squares<const K: usize>(rows: &[[f64; K]], y: &[f64]) -> Result<[f64; K]> {
    let n = rows.len();
    if n != y.len() {
        return Err(Error::invalid("design and response lengths differ"));
    }
    if n < K {
        return Err(Error::invalid("fewer observations than coefficients"));
    }

    let mut scale = [0.0f64; K];
    for row in rows {
        for j in 0..K {
            scale[j] += row[j] * row[j];
        }
    }
    for s in &mut scale {
        *s = libm::sqrt(*s);
        if *s == 0.0 {
            return Err(Error::invalid("design has an all-zero column"));
        }
    }

    // Column-major working copy.
    let mut a: Vec<Vec<f64>> = (0..K).map(|j| rows.iter().map(|r| r[j] / scale[j]).collect()).collect();
    let mut b: Vec<f64> = y.to_vec();

    for k in 0..K {
        let norm = libm::sqrt(a[k][k..].iter().map(|v| v * v).sum::<f64>());
        if norm < 1e-10 {
            return Err(Error::invalid("design matrix is rank deficient"));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for col in a.iter_mut().skip(k) {
                let dot: f64 = v.iter().zip(&col[k..]).map(|(p, q)| p * q).sum();
                let f = 2.0 * dot / vnorm2;
                for (c, vi) in col[k..].iter_mut().zip(&v) {
                    *c -= f * vi;
                }
            }
            let dot: f64 = v.iter().zip(&b[k..]).map(|(p, q)| p * q).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, vi) in b[k..].iter_mut().zip(&v) {
                *c -= f * vi;
            }
        }
        if a[k][k].abs() < 1e-10 {
            return Err(Error::invalid("design matrix is rank deficient"));
        }
    }

    let mut beta = [0.0f64; K];
    for k in (0..K).rev() {
        let mut acc = b[k];
        for j in k + 1..K {
            acc -= a[j][k] * beta[j];
        }
        beta[k] = acc / a[k][k];
    }
    for j in 0..K {
        beta[j] /= scale[j];
    }
    Ok(beta)
}

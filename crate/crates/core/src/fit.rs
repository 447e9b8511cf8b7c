//! Log-log least-squares exponent fits for scaling studies.

use crate::error::{Error, Result};

/// Slope p of the least-squares line log(value) = p * log(n) + c.
pub fn fit_exponent(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(Error::InvalidParameter("need at least 3 pairs".into()));
    }
    if pairs.iter().any(|&(n, v)| !(n > 0.0) || !(v > 0.0)) {
        return Err(Error::InvalidParameter("exponent fit needs positive values".into()));
    }
    let logs: Vec<(f64, f64)> = pairs.iter().map(|&(n, v)| (n.ln(), v.ln())).collect();
    let k = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let denom = k * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(Error::InvalidParameter("degenerate abscissae".into()));
    }
    Ok((k * sxy - sx * sy) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let pairs: Vec<(f64, f64)> =
            (1..=6).map(|k| (2f64.powi(k), 7.0 * 4f64.powi(k))).collect();
        assert!((fit_exponent(&pairs).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear() {
        let pairs: Vec<(f64, f64)> = (1..=5).map(|k| (10.0 * k as f64, 3.0 * 10.0 * k as f64)).collect();
        assert!((fit_exponent(&pairs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn n_three_halves_log() {
        // generate t = N^1.5 log N over N in [2^10, 2^16] and fit
        let pairs: Vec<(f64, f64)> = (10..=16)
            .map(|k| {
                let n = 2f64.powi(k);
                (n, n.powf(1.5) * n.ln())
            })
            .collect();
        let p = fit_exponent(&pairs).unwrap();
        assert!((1.5..=1.75).contains(&p), "slope {p}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_exponent(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(fit_exponent(&[(1.0, 1.0), (2.0, -2.0), (3.0, 3.0)]).is_err());
    }
}

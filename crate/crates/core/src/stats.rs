//! Small numeric helpers shared by the estimation modules.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Two-sided standard normal critical value for a confidence level.
pub fn z_crit(level: f64) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(0.5 + level / 2.0)
}

/// Upper-tail probability of a chi-square variate.
pub fn chisq_sf(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let d = ChiSquared::new(df as f64).expect("df > 0");
    (1.0 - d.cdf(stat.max(0.0))).clamp(0.0, 1.0)
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log of a sum of exponentials.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Empirical quantile with linear interpolation between order statistics
/// (type 7). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_crit_95() {
        assert!((z_crit(0.95) - 1.959963984540054).abs() < 1e-9);
    }

    #[test]
    fn expit_logit_inverse() {
        for &x in &[-30.0, -2.5, 0.0, 0.7, 12.0] {
            assert!((logit(expit(x)) - x).abs() < 1e-8 * (1.0 + x.abs()));
        }
        assert_eq!(expit(0.0), 0.5);
    }

    #[test]
    fn softplus_matches_naive() {
        for &x in &[-5.0, -0.1, 0.0, 0.3, 8.0] {
            let naive = (1.0 + f64::exp(x)).ln();
            assert!((softplus(x) - naive).abs() < 1e-12);
        }
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn chisq_tail() {
        assert_eq!(chisq_sf(0.0, 1), 1.0);
        assert!((chisq_sf(3.841458820694124, 1) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    }
}

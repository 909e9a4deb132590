//! Spearman rank correlation of study effects with baseline risk.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{MetaError, StudyRow};
use crate::stats::z_crit;
use crate::tabular::{self, EffectKind};

/// Fewest studies for which a correlation interval is defined.
pub const MIN_STUDIES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankCorrError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("too few observations: {0}")]
    TooFew(usize),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("correlation undefined: an input vector is constant")]
    Degenerate,
    #[error(transparent)]
    Meta(#[from] MetaError),
}

pub type Result<T> = std::result::Result<T, RankCorrError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub kind: EffectKind,
    pub rho: f64,
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

/// Ranks starting at 1, ties sharing the average of their positions.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation of midranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(RankCorrError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(RankCorrError::TooFew(x.len()));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(RankCorrError::NonFinite);
    }
    if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
        return Err(RankCorrError::Degenerate);
    }
    Ok(pearson(&midranks(x), &midranks(y)))
}

/// Fisher-z interval with variance `(1 + ρ²/2)/(n − 3)`.
pub fn spearman_interval(rho: f64, n: usize, level: f64) -> (f64, f64) {
    if n <= 3 {
        return (-1.0, 1.0);
    }
    let z = rho.atanh();
    let se = ((1.0 + rho * rho / 2.0) / (n as f64 - 3.0)).sqrt();
    let h = z_crit(level) * se;
    ((z - h).tanh().max(-1.0), (z + h).tanh().min(1.0))
}

/// Baseline risks and effect points of each study, after zero-cell
/// correction where triggered.
pub fn baseline_and_effects(studies: &[StudyRow], kind: EffectKind, correction: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p0 = Vec::with_capacity(studies.len());
    let mut eff = Vec::with_capacity(studies.len());
    for s in studies {
        s.validate()?;
        let t = s.analysis_table(correction);
        let (point, _) = tabular::point_and_se(&t, kind)
            .map_err(|source| MetaError::Tabular { study: s.study_id.clone(), source })?;
        p0.push(t.p0());
        eff.push(point);
    }
    Ok((p0, eff))
}

/// Spearman correlation between a measure and baseline risk across the
/// studies of one meta-analysis.
pub fn correlate_meta(studies: &[StudyRow], kind: EffectKind, correction: f64, level: f64) -> Result<SpearmanResult> {
    if studies.len() < MIN_STUDIES {
        return Err(RankCorrError::TooFew(studies.len()));
    }
    let (p0, eff) = baseline_and_effects(studies, kind, correction)?;
    let rho = spearman(&p0, &eff)?;
    let (ci_low, ci_high) = spearman_interval(rho, studies.len(), level);
    Ok(SpearmanResult { kind, rho, n: studies.len(), ci_low: ci_low.min(rho), ci_high: ci_high.max(rho), level })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force midranks: one plus the count of smaller values plus half
    /// the count of other equal values.
    fn oracle_midranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let less = x.iter().filter(|&&u| u < v).count() as f64;
                let equal = x.iter().filter(|&&u| u == v).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }

    fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn monotone_examples() {
        assert_eq!(spearman(&[1., 2., 3.], &[10., 20., 30.]).unwrap(), 1.0);
        assert_eq!(spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0);
    }

    #[test]
    fn errors() {
        assert_eq!(spearman(&[1., 2.], &[1., 2., 3.]), Err(RankCorrError::LengthMismatch(2, 3)));
        assert_eq!(spearman(&[1., 1., 1., 1.], &[1., 2., 3., 4.]), Err(RankCorrError::Degenerate));
        assert_eq!(spearman(&[1., f64::NAN, 3.], &[1., 2., 3.]), Err(RankCorrError::NonFinite));
    }

    #[test]
    fn midrank_oracle_200_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2021);
        let mut checked = 0;
        while checked < 200 {
            let n = rng.random_range(4..40);
            // Small integer support forces ties.
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..9) as f64 * 0.5).collect();
            let Ok(rho) = spearman(&x, &y) else { continue };
            assert_eq!(midranks(&x), oracle_midranks(&x));
            let expect = oracle_pearson(&oracle_midranks(&x), &oracle_midranks(&y));
            assert!((rho - expect).abs() < 1e-12, "{rho} vs {expect}");
            checked += 1;
        }
    }

    fn row(i: usize, te: u64, tn: u64, ce: u64, cn: u64) -> StudyRow {
        StudyRow::new("m", format!("s{i}"), te, tn, ce, cn).unwrap()
    }

    #[test]
    fn constant_rr_exact_expectations() {
        // RR = 0.5 exactly at baseline risks 0.1..0.5.
        let s: Vec<StudyRow> = (1..=5).map(|i| row(i, 50 * i as u64, 1000, 100 * i as u64, 1000)).collect();
        assert_eq!(correlate_meta(&s, EffectKind::Rr, 0.5, 0.95), Err(RankCorrError::Degenerate));
        let or = correlate_meta(&s, EffectKind::Or, 0.5, 0.95).unwrap();
        assert_eq!(or.rho, -1.0);
        assert!(or.ci_low <= or.rho && or.rho <= or.ci_high);
    }

    #[test]
    fn interval_narrows_with_n() {
        let (lo4, hi4) = spearman_interval(0.4, 4, 0.95);
        let (lo40, hi40) = spearman_interval(0.4, 40, 0.95);
        assert!(hi4 - lo4 > hi40 - lo40);
        assert!(lo4 >= -1.0 && hi4 <= 1.0);
    }

    #[test]
    fn needs_four_studies() {
        let s: Vec<StudyRow> = (1..=3).map(|i| row(i, i as u64, 10, 2, 10)).collect();
        assert_eq!(correlate_meta(&s, EffectKind::Rd, 0.5, 0.95), Err(RankCorrError::TooFew(3)));
    }

    #[test]
    fn zero_cells_use_corrected_baseline() {
        let s = vec![row(0, 0, 10, 0, 10), row(1, 2, 10, 1, 10), row(2, 4, 10, 3, 10), row(3, 6, 10, 5, 10)];
        let (p0, _) = baseline_and_effects(&s, EffectKind::Or, 0.5).unwrap();
        assert_eq!(p0[0], 0.5 / 11.0);
        assert_eq!(p0[1], 0.1);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(v in prop::collection::vec((0.01f64..5.0, -3.0f64..3.0), 4..30)) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(r) = spearman(&x, &y) {
                let lx: Vec<f64> = x.iter().map(|a| a.ln()).collect();
                let ey: Vec<f64> = y.iter().map(|b| b.exp()).collect();
                let ay: Vec<f64> = y.iter().map(|b| 3.0 * b + 7.0).collect();
                prop_assert_eq!(spearman(&lx, &ey).unwrap(), r);
                prop_assert_eq!(spearman(&x, &ay).unwrap(), r);
                prop_assert_eq!(spearman(&y, &x).unwrap(), r);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn interval_in_bounds(rho in -1.0f64..=1.0, n in 4usize..200, level in 0.5f64..0.999) {
            let (lo, hi) = spearman_interval(rho, n, level);
            prop_assert!(-1.0 <= lo && lo <= rho + 1e-12 && rho <= hi + 1e-12 && hi <= 1.0);
        }

        #[test]
        fn log_measure_same_rho(cells in prop::collection::vec((1u64..50, 1u64..50, 1u64..50, 1u64..50), 4..15)) {
            let s: Vec<StudyRow> = cells.iter().enumerate()
                .map(|(i, &(a, b, c, d))| row(i, a, a + b, c, c + d)).collect();
            for kind in [EffectKind::Or, EffectKind::Rr] {
                let (p0, e) = baseline_and_effects(&s, kind, 0.5).unwrap();
                let le: Vec<f64> = e.iter().map(|v| v.ln()).collect();
                match (spearman(&p0, &e), spearman(&p0, &le)) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                    (Err(a), Err(b)) => prop_assert_eq!(a, b),
                    other => prop_assert!(false, "{:?}", other),
                }
            }
        }
    }
}

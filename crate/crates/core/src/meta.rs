//! Two-stage random-effects meta-analysis of binary outcomes.
//!
//! Stage one turns each study's arms into an effect `y_i` (log scale for
//! OR/RR, identity for RD) with variance `v_i`; stage two pools them with a
//! between-study variance `τ²` estimated by fixed effect (`τ² = 0`),
//! DerSimonian–Laird or REML.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::brent_minimize;
use crate::tabular::{self, correct_zero_cells, EffectEstimate, EffectKind, TabularError, TwoByTwoTable};

pub const REML_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("invalid study row: {0}")]
    InvalidStudy(String),
    #[error("study '{study}': {source}")]
    Tabular { study: String, source: TabularError },
    #[error("at least two studies are required, got {0}")]
    InsufficientStudies(usize),
    #[error("study variances must be positive and finite")]
    InvalidVariance,
}

pub type Result<T> = std::result::Result<T, MetaError>;

/// One study: treatment and control arm counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StudyRow {
    pub meta_id: String,
    pub study_id: String,
    pub t_events: u64,
    pub t_total: u64,
    pub c_events: u64,
    pub c_total: u64,
}

impl StudyRow {
    pub fn new(
        meta_id: impl Into<String>,
        study_id: impl Into<String>,
        t_events: u64,
        t_total: u64,
        c_events: u64,
        c_total: u64,
    ) -> Result<Self> {
        let row = Self { meta_id: meta_id.into(), study_id: study_id.into(), t_events, t_total, c_events, c_total };
        row.validate()?;
        Ok(row)
    }

    pub fn validate(&self) -> Result<()> {
        if self.meta_id.is_empty() || self.study_id.is_empty() {
            return Err(MetaError::InvalidStudy("identifiers must be non-empty".into()));
        }
        if self.t_total == 0 || self.c_total == 0 {
            return Err(MetaError::InvalidStudy(format!("study '{}': arm totals must be positive", self.study_id)));
        }
        if self.t_events > self.t_total || self.c_events > self.c_total {
            return Err(MetaError::InvalidStudy(format!("study '{}': events exceed arm total", self.study_id)));
        }
        Ok(())
    }

    /// Treatment arm as the exposed row, control as unexposed.
    pub fn table(&self) -> TwoByTwoTable {
        TwoByTwoTable {
            a: self.t_events as f64,
            b: (self.t_total - self.t_events) as f64,
            c: self.c_events as f64,
            d: (self.c_total - self.c_events) as f64,
        }
    }

    /// The table used for estimation: corrected when a cell is zero and
    /// `correction > 0`.
    pub fn analysis_table(&self, correction: f64) -> TwoByTwoTable {
        if correction > 0.0 {
            correct_zero_cells(&self.table(), correction)
        } else {
            self.table()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fe,
    Dl,
    Reml,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fe" => Ok(Method::Fe),
            "dl" => Ok(Method::Dl),
            "reml" => Ok(Method::Reml),
            o => Err(format!("unknown method '{o}' (expected fe, dl or reml)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fe => "FE",
            Method::Dl => "DL",
            Method::Reml => "REML",
        })
    }
}

/// A study effect on the analysis scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEffect {
    pub study_id: String,
    pub y: f64,
    pub v: f64,
    pub corrected: bool,
}

impl StudyEffect {
    pub fn new(study_id: impl Into<String>, y: f64, v: f64) -> Self {
        Self { study_id: study_id.into(), y, v, corrected: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReMetaFit {
    pub kind: EffectKind,
    pub method: Method,
    pub k: usize,
    pub studies: Vec<StudyEffect>,
    pub tau2: f64,
    pub q: f64,
    pub pooled: EffectEstimate,
}

/// Per-study effects and variances.
pub fn study_effects(studies: &[StudyRow], kind: EffectKind, correction: f64) -> Result<Vec<StudyEffect>> {
    studies
        .iter()
        .map(|s| {
            s.validate()?;
            let t = s.analysis_table(correction);
            let (point, se) = tabular::point_and_se(&t, kind)
                .map_err(|source| MetaError::Tabular { study: s.study_id.clone(), source })?;
            Ok(StudyEffect {
                study_id: s.study_id.clone(),
                y: kind.to_transformed(point),
                v: se * se,
                corrected: t != s.table(),
            })
        })
        .collect()
}

/// Effects sorted into a canonical order so sums do not depend on input order.
fn canonical(effects: &[StudyEffect]) -> Vec<(f64, f64)> {
    let mut yv: Vec<(f64, f64)> = effects.iter().map(|e| (e.y, e.v)).collect();
    yv.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    yv
}

fn weighted_mean(yv: &[(f64, f64)], tau2: f64) -> (f64, f64) {
    let (mut sw, mut swy) = (0.0, 0.0);
    for &(y, v) in yv {
        let w = 1.0 / (v + tau2);
        sw += w;
        swy += w * y;
    }
    (swy / sw, sw)
}

fn neg_restricted_loglik(yv: &[(f64, f64)], tau2: f64) -> f64 {
    let (mu, sw) = weighted_mean(yv, tau2);
    let mut acc = sw.ln();
    for &(y, v) in yv {
        let s = v + tau2;
        acc += s.ln() + (y - mu).powi(2) / s;
    }
    0.5 * acc
}

/// Restricted log-likelihood of `τ²` (up to a constant).
pub fn reml_objective(effects: &[StudyEffect], tau2: f64) -> f64 {
    -neg_restricted_loglik(&canonical(effects), tau2)
}

fn q_statistic(yv: &[(f64, f64)]) -> f64 {
    let (mu, _) = weighted_mean(yv, 0.0);
    yv.iter().map(|&(y, v)| (y - mu).powi(2) / v).sum()
}

fn tau2_dl(yv: &[(f64, f64)], q: f64) -> f64 {
    let k = yv.len() as f64;
    let sw: f64 = yv.iter().map(|&(_, v)| 1.0 / v).sum();
    let sw2: f64 = yv.iter().map(|&(_, v)| 1.0 / (v * v)).sum();
    let c = sw - sw2 / sw;
    if c <= 0.0 {
        return 0.0;
    }
    ((q - (k - 1.0)) / c).max(0.0)
}

fn tau2_reml(yv: &[(f64, f64)]) -> f64 {
    let k = yv.len() as f64;
    let ybar = yv.iter().map(|p| p.0).sum::<f64>() / k;
    let upper = 10.0 * yv.iter().map(|&(y, v)| v + (y - ybar).powi(2)).fold(0.0, f64::max);
    let (x, fx) = brent_minimize(|t| neg_restricted_loglik(yv, t), 0.0, upper, REML_TOL);
    if neg_restricted_loglik(yv, 0.0) <= fx {
        0.0
    } else {
        x
    }
}

/// Pool study effects.
pub fn pool(effects: &[StudyEffect], kind: EffectKind, method: Method, level: f64) -> Result<ReMetaFit> {
    let k = effects.len();
    if k < 2 {
        return Err(MetaError::InsufficientStudies(k));
    }
    if effects.iter().any(|e| !(e.v > 0.0) || !e.v.is_finite() || !e.y.is_finite()) {
        return Err(MetaError::InvalidVariance);
    }
    let yv = canonical(effects);
    let q = q_statistic(&yv);
    let tau2 = match method {
        Method::Fe => 0.0,
        Method::Dl => tau2_dl(&yv, q),
        Method::Reml => tau2_reml(&yv),
    };
    let (mu, sw) = weighted_mean(&yv, tau2);
    let pooled = EffectEstimate::from_transformed(kind, mu, sw.sqrt().recip(), level);
    Ok(ReMetaFit { kind, method, k, studies: effects.to_vec(), tau2, q, pooled })
}

/// Per-study estimation followed by pooling.
pub fn two_stage(
    studies: &[StudyRow],
    kind: EffectKind,
    method: Method,
    correction: f64,
    level: f64,
) -> Result<ReMetaFit> {
    let effects = study_effects(studies, kind, correction)?;
    pool(&effects, kind, method, level)
}

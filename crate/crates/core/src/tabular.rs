//! 2×2 table effect measures.
//!
//! A [`TwoByTwoTable`] holds the four cells of a single study or stratum:
//!
//! ```text
//!              event   no event
//! exposed        a        b
//! unexposed      c        d
//! ```
//!
//! Cells are `f64` and may carry the `+0.5` zero-cell correction. Ratio
//! measures are reported with Wald intervals on the log scale, the risk
//! difference on the identity scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::z_crit;

/// Relative tolerance used when comparing crude and stratum-specific points.
pub const COLLAPSIBILITY_RTOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TabularError {
    #[error("invalid cell count {0}: cells must be finite and nonnegative")]
    InvalidCell(f64),
    #[error("zero cell in a table used for {0}; apply the zero-cell correction first")]
    ZeroCell(EffectKind),
    #[error("degenerate margin: a row or column total is zero")]
    DegenerateMargin,
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("at least two strata are required, got {0}")]
    TooFewStrata(usize),
}

pub type Result<T> = std::result::Result<T, TabularError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectKind {
    Or,
    Rr,
    Rd,
}

impl EffectKind {
    pub const ALL: [EffectKind; 3] = [EffectKind::Or, EffectKind::Rr, EffectKind::Rd];

    /// Ratio measures are analysed on the log scale.
    pub fn is_ratio(self) -> bool {
        !matches!(self, EffectKind::Rd)
    }

    /// Map a point on the natural scale to the analysis scale.
    pub fn to_transformed(self, value: f64) -> f64 {
        if self.is_ratio() {
            value.ln()
        } else {
            value
        }
    }

    pub fn from_transformed(self, value: f64) -> f64 {
        if self.is_ratio() {
            value.exp()
        } else {
            value
        }
    }

    /// The measure comparing a treatment risk `p1` with a baseline risk `p0`.
    pub fn from_risks(self, p1: f64, p0: f64) -> f64 {
        match self {
            EffectKind::Or => (p1 / (1.0 - p1)) / (p0 / (1.0 - p0)),
            EffectKind::Rr => p1 / p0,
            EffectKind::Rd => p1 - p0,
        }
    }

    /// Null value on the natural scale.
    pub fn null(self) -> f64 {
        if self.is_ratio() {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EffectKind::Or => "OR",
            EffectKind::Rr => "RR",
            EffectKind::Rd => "RD",
        })
    }
}

impl FromStr for EffectKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "or" => Ok(EffectKind::Or),
            "rr" => Ok(EffectKind::Rr),
            "rd" => Ok(EffectKind::Rd),
            other => Err(format!("unknown measure '{other}' (expected or, rr or rd)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoByTwoTable {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl TwoByTwoTable {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        for v in [a, b, c, d] {
            if !v.is_finite() || v < 0.0 {
                return Err(TabularError::InvalidCell(v));
            }
        }
        Ok(Self { a, b, c, d })
    }

    /// Build from arm totals: `(exposed events, exposed total, unexposed events, unexposed total)`.
    pub fn from_arms(t_events: f64, t_total: f64, c_events: f64, c_total: f64) -> Result<Self> {
        Self::new(t_events, t_total - t_events, c_events, c_total - c_events)
    }

    pub fn has_zero_cell(&self) -> bool {
        self.cells().contains(&0.0)
    }

    pub fn cells(&self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn exposed_total(&self) -> f64 {
        self.a + self.b
    }

    pub fn unexposed_total(&self) -> f64 {
        self.c + self.d
    }

    /// Risk in the exposed (treatment) arm.
    pub fn p1(&self) -> f64 {
        self.a / self.exposed_total()
    }

    /// Baseline risk: the unexposed (control) arm risk.
    pub fn p0(&self) -> f64 {
        self.c / self.unexposed_total()
    }

    pub fn margins_positive(&self) -> bool {
        self.a + self.b > 0.0
            && self.c + self.d > 0.0
            && self.a + self.c > 0.0
            && self.b + self.d > 0.0
    }

    /// Multiply every cell by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self { a: self.a * k, b: self.b * k, c: self.c * k, d: self.d * k }
    }
}

impl std::ops::Add for TwoByTwoTable {
    type Output = TwoByTwoTable;

    fn add(self, o: Self) -> Self {
        Self { a: self.a + o.a, b: self.b + o.b, c: self.c + o.c, d: self.d + o.d }
    }
}

/// A point estimate with its standard error on the analysis scale and a
/// Wald interval at `level`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub kind: EffectKind,
    pub point: f64,
    /// Standard error on the log scale for OR/RR, identity scale for RD.
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

impl EffectEstimate {
    /// Wald interval around `center` (analysis scale), back-transformed.
    pub fn from_transformed(kind: EffectKind, center: f64, se: f64, level: f64) -> Self {
        let half = z_crit(level) * se;
        Self {
            kind,
            point: kind.from_transformed(center),
            se,
            ci_low: kind.from_transformed(center - half),
            ci_high: kind.from_transformed(center + half),
            level,
        }
    }

    /// The point on the analysis scale.
    pub fn transformed(&self) -> f64 {
        self.kind.to_transformed(self.point)
    }

    pub fn contains(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

/// Add `increment` to every cell when any cell is zero.
pub fn correct_zero_cells(t: &TwoByTwoTable, increment: f64) -> TwoByTwoTable {
    if t.has_zero_cell() {
        TwoByTwoTable { a: t.a + increment, b: t.b + increment, c: t.c + increment, d: t.d + increment }
    } else {
        *t
    }
}

/// Point and analysis-scale standard error of one measure.
pub(crate) fn point_and_se(t: &TwoByTwoTable, kind: EffectKind) -> Result<(f64, f64)> {
    if t.a + t.b <= 0.0 || t.c + t.d <= 0.0 || t.a + t.c <= 0.0 || t.b + t.d <= 0.0 {
        return Err(TabularError::DegenerateMargin);
    }
    let n1 = t.a + t.b;
    let n0 = t.c + t.d;
    match kind {
        EffectKind::Or => {
            if t.has_zero_cell() {
                return Err(TabularError::ZeroCell(kind));
            }
            let point = (t.a * t.d) / (t.b * t.c);
            let se = (1.0 / t.a + 1.0 / t.b + 1.0 / t.c + 1.0 / t.d).sqrt();
            Ok((point, se))
        }
        EffectKind::Rr => {
            if t.a == 0.0 || t.c == 0.0 {
                return Err(TabularError::ZeroCell(kind));
            }
            let point = (t.a * n0) / (t.c * n1);
            let var = 1.0 / t.a - 1.0 / n1 + 1.0 / t.c - 1.0 / n0;
            Ok((point, var.max(0.0).sqrt()))
        }
        EffectKind::Rd => {
            let p1 = t.a / n1;
            let p0 = t.c / n0;
            let se = (p1 * (1.0 - p1) / n1 + p0 * (1.0 - p0) / n0).sqrt();
            Ok((p1 - p0, se))
        }
    }
}

/// Estimate one effect measure from a table.
pub fn effect(t: &TwoByTwoTable, kind: EffectKind, level: f64) -> Result<EffectEstimate> {
    if !(level > 0.0 && level < 1.0) {
        return Err(TabularError::Domain(format!("level {level} not in (0,1)")));
    }
    let (point, se) = point_and_se(t, kind)?;
    let half = z_crit(level) * se;
    let (ci_low, ci_high) = if kind.is_ratio() {
        let l = point.ln();
        ((l - half).exp(), (l + half).exp())
    } else {
        (point - half, point + half)
    };
    Ok(EffectEstimate { kind, point, se, ci_low, ci_high, level })
}

fn check_prob(p0: f64) -> Result<()> {
    if p0 > 0.0 && p0 < 1.0 {
        Ok(())
    } else {
        Err(TabularError::Domain(format!("baseline risk {p0} not in (0,1)")))
    }
}

/// Risk ratio implied by an odds ratio at baseline risk `p0`.
pub fn rr_from_or_at_baseline(or: f64, p0: f64) -> Result<f64> {
    check_prob(p0)?;
    if !(or > 0.0) || !or.is_finite() {
        return Err(TabularError::Domain(format!("odds ratio {or} must be positive")));
    }
    Ok(or / (1.0 - p0 + p0 * or))
}

/// Odds ratio implied by a risk ratio at baseline risk `p0`.
pub fn or_from_rr_at_baseline(rr: f64, p0: f64) -> Result<f64> {
    check_prob(p0)?;
    if !(rr > 0.0) || !rr.is_finite() {
        return Err(TabularError::Domain(format!("risk ratio {rr} must be positive")));
    }
    let p1 = rr * p0;
    if p1 >= 1.0 {
        return Err(TabularError::Domain(format!(
            "risk ratio {rr} at baseline {p0} implies a risk of {p1} >= 1"
        )));
    }
    Ok((p1 / (1.0 - p1)) / (p0 / (1.0 - p0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapsibilityReport {
    pub kind: EffectKind,
    pub crude: EffectEstimate,
    pub strata: Vec<(String, EffectEstimate)>,
    /// Crude and every stratum point agree.
    pub collapsible: bool,
    /// Stratum points agree with each other.
    pub homogeneous: bool,
    /// Crude minus the common stratum value on the analysis scale; only
    /// defined for homogeneous strata.
    pub attenuation: Option<f64>,
}

fn rel_close(x: f64, y: f64) -> bool {
    (x - y).abs() <= COLLAPSIBILITY_RTOL * x.abs().max(y.abs()).max(f64::MIN_POSITIVE)
}

/// Compare the crude (pooled-cell) measure with the stratum-specific ones.
pub fn collapsibility_report(
    strata: &[(String, TwoByTwoTable)],
    kind: EffectKind,
    level: f64,
) -> Result<CollapsibilityReport> {
    if strata.len() < 2 {
        return Err(TabularError::TooFewStrata(strata.len()));
    }
    let per = strata
        .iter()
        .map(|(label, t)| effect(t, kind, level).map(|e| (label.clone(), e)))
        .collect::<Result<Vec<_>>>()?;
    let pooled = strata.iter().skip(1).fold(strata[0].1, |acc, (_, t)| acc + *t);
    let crude = effect(&pooled, kind, level)?;

    let first = per[0].1.point;
    let homogeneous = per.iter().all(|(_, e)| rel_close(e.point, first));
    let collapsible = homogeneous && per.iter().all(|(_, e)| rel_close(e.point, crude.point));
    let attenuation = homogeneous.then(|| {
        let common = per.iter().map(|(_, e)| e.transformed()).sum::<f64>() / per.len() as f64;
        crude.transformed() - common
    });

    Ok(CollapsibilityReport { kind, crude, strata: per, collapsible, homogeneous, attenuation })
}

//! Embedded two-stratum fixtures and the expected values of the GLM and
//! meta-analysis tables computed from them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::glm::{self, two_strata_dataset, Dataset, GlmError, Link, ModelSpec};
use crate::meta::{self, MetaError, Method, StudyRow};
use crate::tabular::{self, collapsibility_report, CollapsibilityReport, EffectKind, TabularError, TwoByTwoTable};

pub const TABLE1_TOL: f64 = 0.005;
pub const TABLE2_TOL: f64 = 0.01;
/// Tolerances for the heterogeneous 1A RR summary.
pub const TABLE2_HETERO_POINT_TOL: f64 = 0.1;
pub const TABLE2_HETERO_BOUND_TOL: f64 = 0.25;

/// Two strata of counts, each `(exposed events, exposed non-events,
/// unexposed events, unexposed non-events)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub name: &'static str,
    pub z1: [f64; 4],
    pub z0: [f64; 4],
}

/// Constant OR of 8/3 across strata; RR varies.
pub const FIXTURE_1A: Fixture = Fixture { name: "1A", z1: [80., 20., 60., 40.], z0: [40., 60., 20., 80.] };
/// Constant RR of 2 across strata; OR varies.
pub const FIXTURE_1B: Fixture = Fixture { name: "1B", z1: [60., 40., 30., 70.], z0: [40., 60., 20., 80.] };

impl Fixture {
    pub fn dataset(&self) -> Dataset {
        two_strata_dataset(self.z1, self.z0)
    }

    pub fn strata(&self) -> Vec<(String, TwoByTwoTable)> {
        let t = |c: [f64; 4]| TwoByTwoTable { a: c[0], b: c[1], c: c[2], d: c[3] };
        vec![("Z=0".to_string(), t(self.z0)), ("Z=1".to_string(), t(self.z1))]
    }

    /// The two strata as studies of one meta-analysis.
    pub fn studies(&self) -> Vec<StudyRow> {
        let row = |id: &str, c: [f64; 4]| StudyRow {
            meta_id: format!("table{}", self.name),
            study_id: id.to_string(),
            t_events: c[0] as u64,
            t_total: (c[0] + c[1]) as u64,
            c_events: c[2] as u64,
            c_total: (c[2] + c[3]) as u64,
        };
        vec![row("Z=0", self.z0), row("Z=1", self.z1)]
    }

    pub fn collapsibility(&self, kind: EffectKind) -> Result<CollapsibilityReport, TabularError> {
        collapsibility_report(&self.strata(), kind, 0.95)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub row: String,
    pub column: String,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Comparison {
    fn new(row: &str, column: &str, expected: f64, actual: f64, tolerance: f64) -> Self {
        Self {
            row: row.to_string(),
            column: column.to_string(),
            expected,
            actual,
            tolerance,
            pass: (expected - actual).abs() <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub table: String,
    pub comparisons: Vec<Comparison>,
}

impl ReproReport {
    pub fn passed(&self) -> usize {
        self.comparisons.iter().filter(|c| c.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        self.passed() == self.comparisons.len()
    }
}

impl fmt::Display for ReproReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.comparisons {
            writeln!(
                f,
                "{}  {:<22} {:<18} expected {:>7.3}  actual {:>8.4}  diff {:+.4} (tol {})",
                if c.pass { "PASS" } else { "FAIL" },
                c.row,
                c.column,
                c.expected,
                c.actual,
                c.actual - c.expected,
                c.tolerance
            )?;
        }
        writeln!(f, "{}: {}/{} values match", self.table, self.passed(), self.comparisons.len())
    }
}

const TABLE1_COLUMNS: [(Fixture, Link, &str); 4] = [
    (FIXTURE_1B, Link::Logit, "1B OR (logistic)"),
    (FIXTURE_1B, Link::Log, "1B RR (log-binomial)"),
    (FIXTURE_1A, Link::Logit, "1A OR (logistic)"),
    (FIXTURE_1A, Link::Log, "1A RR (log-binomial)"),
];

/// Rows of the GLM table with the published values per column.
const TABLE1_EXPECTED: [(&str, [f64; 4]); 9] = [
    ("X", [2.67, 2.00, 2.67, 2.00]),
    ("Z", [1.71, 1.50, 6.00, 3.00]),
    ("X#Z", [1.31, 1.00, 1.00, 0.67]),
    ("X (Z=0)", [2.67, 2.00, 2.67, 2.00]),
    ("X (Z=1)", [3.50, 2.00, 2.67, 1.33]),
    ("Z (X=0)", [1.71, 1.50, 6.00, 3.00]),
    ("Z (X=1)", [2.25, 1.50, 6.00, 2.00]),
    ("X (crude)", [3.00, 2.00, 2.25, 1.50]),
    ("Z (crude)", [1.91, 1.50, 5.44, 2.33]),
];

/// Exponentiated coefficient named by a table row.
fn table1_value(data: &Dataset, link: Link, row: &str) -> Result<f64, GlmError> {
    let single = |d: &Dataset, term: &str| -> Result<f64, GlmError> {
        let f = glm::fit(d, &ModelSpec::parse(link, term)?)?;
        f.exp_coef(term)
    };
    match row {
        "X" | "Z" => glm::fit(data, &ModelSpec::parse(link, "X,Z,X:Z")?)?.exp_coef(row),
        "X#Z" => glm::fit(data, &ModelSpec::parse(link, "X,Z,X:Z")?)?.exp_coef("X:Z"),
        "X (Z=0)" => single(&data.subset("Z", 0.0)?, "X"),
        "X (Z=1)" => single(&data.subset("Z", 1.0)?, "X"),
        "Z (X=0)" => single(&data.subset("X", 0.0)?, "Z"),
        "Z (X=1)" => single(&data.subset("X", 1.0)?, "Z"),
        "X (crude)" => single(data, "X"),
        "Z (crude)" => single(data, "Z"),
        other => Err(GlmError::MissingTerm(other.to_string())),
    }
}

/// Refits every cell of the GLM table and compares it with the published
/// value.
pub fn table1() -> Result<ReproReport, GlmError> {
    let mut comparisons = Vec::new();
    for (row, expected) in TABLE1_EXPECTED {
        for (j, (fixture, link, column)) in TABLE1_COLUMNS.iter().enumerate() {
            let actual = table1_value(&fixture.dataset(), *link, row)?;
            comparisons.push(Comparison::new(row, column, expected[j], actual, TABLE1_TOL));
        }
    }
    Ok(ReproReport { table: "Table 1".into(), comparisons })
}

const TABLE2_COLUMNS: [(Fixture, EffectKind, &str); 4] = [
    (FIXTURE_1B, EffectKind::Or, "1B OR"),
    (FIXTURE_1B, EffectKind::Rr, "1B RR"),
    (FIXTURE_1A, EffectKind::Or, "1A OR"),
    (FIXTURE_1A, EffectKind::Rr, "1A RR"),
];

/// `(point, low, high)` per column for the Z=0 row, Z=1 row and summary.
const TABLE2_EXPECTED: [(&str, [[f64; 3]; 4]); 3] = [
    ("Z=0", [[2.67, 1.42, 5.02], [2.00, 1.26, 3.17], [2.67, 1.42, 5.02], [2.00, 1.26, 3.17]]),
    ("Z=1", [[3.50, 1.95, 6.29], [2.00, 1.42, 2.81], [2.67, 1.42, 5.02], [1.33, 1.11, 1.61]]),
    ("Summary", [[3.09, 2.01, 4.74], [2.00, 1.52, 2.63], [2.67, 1.70, 4.17], [1.54, 1.05, 2.06]]),
];

#[derive(Debug, thiserror::Error)]
pub enum Table2Error {
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
}

/// Per-stratum Wald intervals and REML summaries of the two strata, compared
/// with the published values.
pub fn table2() -> Result<ReproReport, Table2Error> {
    let mut comparisons = Vec::new();
    for (row, expected) in TABLE2_EXPECTED {
        for (j, (fixture, kind, column)) in TABLE2_COLUMNS.iter().enumerate() {
            let est = match row {
                "Summary" => meta::two_stage(&fixture.studies(), *kind, Method::Reml, 0.5, 0.95)?.pooled,
                _ => {
                    let strata = fixture.strata();
                    let t = strata.iter().find(|(l, _)| l == row).expect("known stratum").1;
                    tabular::effect(&t, *kind, 0.95)?
                }
            };
            let hetero = row == "Summary" && fixture.name == "1A" && *kind == EffectKind::Rr;
            let (tp, tb) = if hetero { (TABLE2_HETERO_POINT_TOL, TABLE2_HETERO_BOUND_TOL) } else { (TABLE2_TOL, TABLE2_TOL) };
            let e = expected[j];
            comparisons.push(Comparison::new(row, column, e[0], est.point, tp));
            comparisons.push(Comparison::new(&format!("{row} lower"), column, e[1], est.ci_low, tb));
            comparisons.push(Comparison::new(&format!("{row} upper"), column, e[2], est.ci_high, tb));
        }
    }
    Ok(ReproReport { table: "Table 2".into(), comparisons })
}

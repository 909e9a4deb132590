//! Portability screening across many meta-analyses, and synthetic corpora
//! generated under a known constant-effect mechanism.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{MetaError, StudyRow};
use crate::rankcorr::{self, RankCorrError, SpearmanResult};
use crate::tabular::EffectKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("no meta-analysis has at least {min_studies} studies ({} skipped)", skipped.len())]
    EmptyCorpus { min_studies: usize, skipped: Vec<SkippedMeta> },
    #[error("infeasible mechanism: {0}")]
    InfeasibleMechanism(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("meta-analysis '{meta_id}': {source}")]
    Correlation { meta_id: String, source: RankCorrError },
    #[error(transparent)]
    Meta(#[from] MetaError),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedMeta {
    pub meta_id: String,
    pub k: usize,
}

/// Per-meta-analysis correlations of each measure with baseline risk.
/// A `None` correlation means the measure or the baseline risks were
/// constant across studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub meta_id: String,
    pub k: usize,
    pub rho_or: Option<SpearmanResult>,
    pub rho_rr: Option<SpearmanResult>,
    pub rho_rd: Option<SpearmanResult>,
}

impl CorpusRecord {
    pub fn rho(&self, kind: EffectKind) -> Option<f64> {
        match kind {
            EffectKind::Or => self.rho_or,
            EffectKind::Rr => self.rho_rr,
            EffectKind::Rd => self.rho_rd,
        }
        .map(|r| r.rho)
    }

    /// `(ρ_OR, ρ_RR)` when both are defined.
    pub fn or_rr(&self) -> Option<(f64, f64)> {
        Some((self.rho(EffectKind::Or)?, self.rho(EffectKind::Rr)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub stratum: String,
    pub k_min: usize,
    /// Exclusive upper bound on study count; `None` for the open stratum.
    pub k_max: Option<usize>,
    pub n_meta: usize,
    /// Records whose ρ_OR or ρ_RR is undefined; excluded from the fractions.
    pub n_degenerate: usize,
    pub frac_both_negative: Option<f64>,
    pub frac_or_negligible_rr_not: Option<f64>,
    pub frac_rr_negligible_or_not: Option<f64>,
    /// Least-squares line of ρ_RR on ρ_OR.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub min_studies: usize,
    pub threshold: f64,
    pub split_at: usize,
    pub correction: f64,
    pub level: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self { min_studies: 5, threshold: 0.3, split_at: 20, correction: 0.5, level: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusAnalysis {
    pub records: Vec<CorpusRecord>,
    pub summaries: Vec<CorpusSummary>,
    pub skipped: Vec<SkippedMeta>,
}

/// Groups rows by `meta_id` (ascending); studies within a group are put in
/// a canonical order.
pub fn group_by_meta(rows: &[StudyRow]) -> BTreeMap<&str, Vec<&StudyRow>> {
    let mut groups: BTreeMap<&str, Vec<&StudyRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.meta_id.as_str()).or_default().push(r);
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| {
            (&a.study_id, a.t_events, a.t_total, a.c_events, a.c_total).cmp(&(
                &b.study_id,
                b.t_events,
                b.t_total,
                b.c_events,
                b.c_total,
            ))
        });
    }
    groups
}

fn correlate(meta_id: &str, studies: &[StudyRow], kind: EffectKind, opts: &AnalyzeOptions) -> Result<Option<SpearmanResult>> {
    match rankcorr::correlate_meta(studies, kind, opts.correction, opts.level) {
        Ok(r) => Ok(Some(r)),
        Err(RankCorrError::Degenerate) => Ok(None),
        Err(source) => Err(CorpusError::Correlation { meta_id: meta_id.to_string(), source }),
    }
}

/// Ordinary least squares `y = intercept + slope·x`; `None` without spread in `x`.
pub fn ols(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn summarize(label: String, k_min: usize, k_max: Option<usize>, records: &[&CorpusRecord], threshold: f64) -> CorpusSummary {
    let pairs: Vec<(f64, f64)> = records.iter().filter_map(|r| r.or_rr()).collect();
    let frac = |pred: &dyn Fn(&(f64, f64)) -> bool| {
        (!pairs.is_empty()).then(|| pairs.iter().filter(|p| pred(p)).count() as f64 / pairs.len() as f64)
    };
    let line = ols(&pairs);
    CorpusSummary {
        stratum: label,
        k_min,
        k_max,
        n_meta: records.len(),
        n_degenerate: records.len() - pairs.len(),
        frac_both_negative: frac(&|&(o, r)| o < 0.0 && r < 0.0),
        frac_or_negligible_rr_not: frac(&|&(o, r)| o.abs() < threshold && r.abs() >= threshold),
        frac_rr_negligible_or_not: frac(&|&(o, r)| r.abs() < threshold && o.abs() >= threshold),
        slope: line.map(|l| l.0),
        intercept: line.map(|l| l.1),
        threshold,
    }
}

/// Correlates OR, RR and RD with baseline risk in every meta-analysis with
/// at least `min_studies` studies, then summarizes sign patterns and
/// negligibility crossovers in the strata `[min_studies, split_at)` and
/// `[split_at, ∞)`.
pub fn analyze(rows: &[StudyRow], opts: &AnalyzeOptions) -> Result<CorpusAnalysis> {
    if opts.min_studies < rankcorr::MIN_STUDIES {
        return Err(CorpusError::InvalidOptions(format!("min_studies must be at least {}", rankcorr::MIN_STUDIES)));
    }
    if opts.split_at <= opts.min_studies {
        return Err(CorpusError::InvalidOptions("split_at must exceed min_studies".into()));
    }
    if !(opts.threshold > 0.0 && opts.threshold <= 1.0) {
        return Err(CorpusError::InvalidOptions("threshold must lie in (0, 1]".into()));
    }
    for r in rows {
        r.validate()?;
    }
    let groups = group_by_meta(rows);
    let mut skipped = Vec::new();
    let mut kept = Vec::new();
    for (id, studies) in groups {
        if studies.len() < opts.min_studies {
            skipped.push(SkippedMeta { meta_id: id.to_string(), k: studies.len() });
        } else {
            kept.push((id, studies.into_iter().cloned().collect::<Vec<_>>()));
        }
    }
    if kept.is_empty() {
        return Err(CorpusError::EmptyCorpus { min_studies: opts.min_studies, skipped });
    }
    let records = kept
        .par_iter()
        .map(|(id, studies)| {
            Ok(CorpusRecord {
                meta_id: id.to_string(),
                k: studies.len(),
                rho_or: correlate(id, studies, EffectKind::Or, opts)?,
                rho_rr: correlate(id, studies, EffectKind::Rr, opts)?,
                rho_rd: correlate(id, studies, EffectKind::Rd, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let small: Vec<&CorpusRecord> = records.iter().filter(|r| r.k < opts.split_at).collect();
    let large: Vec<&CorpusRecord> = records.iter().filter(|r| r.k >= opts.split_at).collect();
    let summaries = vec![
        summarize(
            format!("{} <= k < {}", opts.min_studies, opts.split_at),
            opts.min_studies,
            Some(opts.split_at),
            &small,
            opts.threshold,
        ),
        summarize(format!("k >= {}", opts.split_at), opts.split_at, None, &large, opts.threshold),
    ];
    Ok(CorpusAnalysis { records, summaries, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    ConstantOr,
    ConstantRr,
    ConstantRd,
}

impl Mechanism {
    pub fn kind(self) -> EffectKind {
        match self {
            Mechanism::ConstantOr => EffectKind::Or,
            Mechanism::ConstantRr => EffectKind::Rr,
            Mechanism::ConstantRd => EffectKind::Rd,
        }
    }

    /// Treatment-arm risk at baseline risk `p0`.
    pub fn treatment_risk(self, effect: f64, p0: f64) -> f64 {
        match self {
            Mechanism::ConstantOr => effect * p0 / (1.0 - p0 + effect * p0),
            Mechanism::ConstantRr => effect * p0,
            Mechanism::ConstantRd => p0 + effect,
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::ConstantOr => "constant-or",
            Mechanism::ConstantRr => "constant-rr",
            Mechanism::ConstantRd => "constant-rd",
        })
    }
}

impl FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "constant-or" => Ok(Mechanism::ConstantOr),
            "constant-rr" => Ok(Mechanism::ConstantRr),
            "constant-rd" => Ok(Mechanism::ConstantRd),
            other => Err(format!("unknown mechanism '{other}' (expected constant-or, constant-rr or constant-rd)")),
        }
    }
}

/// A generator of meta-analyses in which one measure is constant across
/// studies. Baseline risks are uniform on `baseline`, study counts and arm
/// sizes uniform on their inclusive ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimMechanism {
    pub mechanism: Mechanism,
    pub effect: f64,
    pub baseline: (f64, f64),
    pub studies: (usize, usize),
    pub arm_size: (u64, u64),
    pub seed: u64,
}

impl SimMechanism {
    pub const DEFAULT_BASELINE: (f64, f64) = (0.1, 0.9);
    pub const DEFAULT_STUDIES: (usize, usize) = (5, 40);
    pub const DEFAULT_ARM_SIZE: (u64, u64) = (50, 500);

    /// Mechanism with default ranges; fails if the effect cannot keep both
    /// arms' risks inside (0, 1) over the baseline range.
    pub fn new(mechanism: Mechanism, effect: f64, seed: u64) -> Result<Self> {
        Self::with_ranges(
            mechanism,
            effect,
            Self::DEFAULT_BASELINE,
            Self::DEFAULT_STUDIES,
            Self::DEFAULT_ARM_SIZE,
            seed,
        )
    }

    pub fn with_ranges(
        mechanism: Mechanism,
        effect: f64,
        baseline: (f64, f64),
        studies: (usize, usize),
        arm_size: (u64, u64),
        seed: u64,
    ) -> Result<Self> {
        let bad = |m: String| Err(CorpusError::InfeasibleMechanism(m));
        let (lo, hi) = baseline;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("baseline range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"));
        }
        if !effect.is_finite() {
            return bad("effect must be finite".into());
        }
        match mechanism {
            Mechanism::ConstantOr | Mechanism::ConstantRr if effect <= 0.0 => {
                return bad(format!("{mechanism} needs a positive effect, got {effect}"));
            }
            Mechanism::ConstantRr if effect * hi >= 1.0 => {
                return bad(format!("RR {effect} times baseline {hi} reaches 1"));
            }
            Mechanism::ConstantRd if lo + effect <= 0.0 || hi + effect >= 1.0 => {
                return bad(format!("RD {effect} moves baseline range ({lo}, {hi}) outside (0, 1)"));
            }
            _ => {}
        }
        if studies.0 < 1 || studies.0 > studies.1 {
            return bad(format!("study-count range {studies:?} is empty"));
        }
        if arm_size.0 < 1 || arm_size.0 > arm_size.1 {
            return bad(format!("arm-size range {arm_size:?} is empty"));
        }
        Ok(Self { mechanism, effect, baseline, studies, arm_size, seed })
    }

    fn meta_analysis(&self, index: usize) -> Vec<StudyRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let meta_id = format!("ma{:05}", index + 1);
        let k = rng.random_range(self.studies.0..=self.studies.1);
        (0..k)
            .map(|j| {
                let p0 = if self.baseline.0 == self.baseline.1 {
                    self.baseline.0
                } else {
                    rng.random_range(self.baseline.0..self.baseline.1)
                };
                let p1 = self.mechanism.treatment_risk(self.effect, p0);
                let n = rng.random_range(self.arm_size.0..=self.arm_size.1);
                let t = Binomial::new(n, p1).expect("feasible risk").sample(&mut rng);
                let c = Binomial::new(n, p0).expect("feasible risk").sample(&mut rng);
                StudyRow {
                    meta_id: meta_id.clone(),
                    study_id: format!("s{:03}", j + 1),
                    t_events: t,
                    t_total: n,
                    c_events: c,
                    c_total: n,
                }
            })
            .collect()
    }
}

/// Generates `n_meta` meta-analyses. Each draws from its own substream, so
/// the output does not depend on scheduling.
pub fn simulate(mech: &SimMechanism, n_meta: usize) -> Result<Vec<StudyRow>> {
    if n_meta == 0 {
        return Err(CorpusError::InvalidOptions("n_meta must be at least 1".into()));
    }
    let parts: Vec<Vec<StudyRow>> = (0..n_meta).into_par_iter().map(|i| mech.meta_analysis(i)).collect();
    Ok(parts.into_iter().flatten().collect())
}

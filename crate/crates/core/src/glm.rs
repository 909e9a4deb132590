//! Binomial generalized linear models with logit or log link.
//!
//! Fitting is iteratively reweighted least squares (Fisher scoring) with
//! step-halving. For the log link every accepted iterate keeps all fitted
//! probabilities at or below `1 - 1e-10`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{chisq_sf, expit, quantile_sorted, softplus, z_crit};
use crate::tabular::{EffectEstimate, EffectKind};

pub const MAX_ITER: usize = 100;
pub const DEVIANCE_RTOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-8;
/// A deviance-based stop also requires the score to be at least this small.
pub const GRADIENT_CEILING: f64 = 1e-6;
/// Upper bound on fitted probabilities for the log link.
pub const LOG_LINK_CEILING: f64 = 1.0 - 1e-10;
/// Coefficients beyond this magnitude (logit) indicate separation.
pub const SEPARATION_BOUND: f64 = 30.0;
const MAX_HALVINGS: usize = 60;

pub const LRT_NOTE: &str = "Selecting or dropping model terms by p-value is discouraged: \
excluding a term because of a large p-value biases both marginal and subgroup estimates.";

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("design matrix is rank deficient (collinear terms)")]
    RankDeficient,
    #[error("logistic estimates diverge (separation) for term '{0}'")]
    Separation(String),
    #[error("log-link maximum likelihood estimate lies on the p = 1 boundary")]
    Boundary(Box<GlmFit>),
    #[error("term '{0}' not in model")]
    MissingTerm(String),
    #[error("models are not nested: {0}")]
    Nesting(String),
    #[error("fit has not converged")]
    NotConverged,
}

pub type Result<T> = std::result::Result<T, GlmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Log,
}

impl Link {
    fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => expit(eta),
            Link::Log => eta.exp(),
        }
    }

    /// `dμ/dη` at `eta`.
    fn derivative(self, eta: f64, mu: f64) -> f64 {
        match self {
            Link::Logit => mu * (1.0 - mu),
            Link::Log => eta.exp(),
        }
    }

    /// `(ln μ, ln(1-μ))`, computed without cancellation.
    fn log_probs(self, eta: f64) -> (f64, f64) {
        match self {
            Link::Logit => (-softplus(-eta), -softplus(eta)),
            Link::Log => (eta, (-eta.exp_m1()).ln()),
        }
    }

    /// The effect measure an exponentiated coefficient represents.
    pub fn measure(self) -> EffectKind {
        match self {
            Link::Logit => EffectKind::Or,
            Link::Log => EffectKind::Rr,
        }
    }
}

impl FromStr for Link {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(Link::Logit),
            "log" => Ok(Link::Log),
            o => Err(format!("unknown link '{o}' (expected logit or log)")),
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Link::Logit => "logit",
            Link::Log => "log",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Main(String),
    Product(String, String),
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Main(a) => a.clone(),
            Term::Product(a, b) => format!("{a}:{b}"),
        }
    }

    fn same_as(&self, other: &Term) -> bool {
        match (self, other) {
            (Term::Main(a), Term::Main(b)) => a == b,
            (Term::Product(a, b), Term::Product(c, d)) => (a == c && b == d) || (a == d && b == c),
            _ => false,
        }
    }
}

impl FromStr for Term {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split([':', '#', '*']).map(str::trim).collect();
        match parts.as_slice() {
            [a] if !a.is_empty() => Ok(Term::Main(a.to_string())),
            [a, b] if !a.is_empty() && !b.is_empty() => Ok(Term::Product(a.to_string(), b.to_string())),
            _ => Err(format!("cannot parse term '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub link: Link,
    pub terms: Vec<Term>,
}

impl ModelSpec {
    pub fn new(link: Link, terms: Vec<Term>) -> Result<Self> {
        for (i, t) in terms.iter().enumerate() {
            if terms[..i].iter().any(|u| u.same_as(t)) {
                return Err(GlmError::InvalidSpec(format!("duplicate term '{}'", t.name())));
            }
            if let Term::Product(a, b) = t {
                if a == b {
                    return Err(GlmError::InvalidSpec(format!("product of '{a}' with itself")));
                }
                for f in [a, b] {
                    if !terms.iter().any(|u| u == &Term::Main(f.clone())) {
                        return Err(GlmError::InvalidSpec(format!(
                            "product term '{}' requires main effect '{f}'",
                            t.name()
                        )));
                    }
                }
            }
        }
        Ok(Self { link, terms })
    }

    /// Parse a comma-separated term list such as `X,Z,X:Z`.
    pub fn parse(link: Link, terms: &str) -> Result<Self> {
        let terms = terms
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<Term>().map_err(GlmError::InvalidSpec))
            .collect::<Result<Vec<_>>>()?;
        Self::new(link, terms)
    }

    /// Coefficient names, intercept first.
    pub fn coefficient_names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string()).chain(self.terms.iter().map(Term::name)).collect()
    }

    fn contains(&self, t: &Term) -> bool {
        self.terms.iter().any(|u| u.same_as(t))
    }
}

/// One covariate pattern with its event and trial totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub values: Vec<f64>,
    pub events: f64,
    pub trials: f64,
}

/// Binomial data in grouped form. Row-level input is aggregated by
/// covariate pattern on construction, so both representations fit identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    covariates: Vec<String>,
    patterns: Vec<Pattern>,
}

impl Dataset {
    pub fn from_patterns(covariates: Vec<String>, patterns: Vec<Pattern>) -> Result<Self> {
        for (i, c) in covariates.iter().enumerate() {
            if c.is_empty() || covariates[..i].contains(c) {
                return Err(GlmError::InvalidData(format!("covariate names must be unique and non-empty: '{c}'")));
            }
        }
        let mut out: Vec<Pattern> = Vec::new();
        for p in patterns {
            if p.values.len() != covariates.len() {
                return Err(GlmError::InvalidData("pattern length differs from covariate count".into()));
            }
            if !p.values.iter().all(|v| v.is_finite()) {
                return Err(GlmError::InvalidData("non-finite covariate value".into()));
            }
            if !(p.trials > 0.0) || !(p.events >= 0.0) || p.events > p.trials || !p.trials.is_finite() {
                return Err(GlmError::InvalidData(format!(
                    "need 0 <= events <= trials and trials > 0, got {}/{}",
                    p.events, p.trials
                )));
            }
            match out.iter_mut().find(|q| q.values == p.values) {
                Some(q) => {
                    q.events += p.events;
                    q.trials += p.trials;
                }
                None => out.push(p),
            }
        }
        if out.is_empty() {
            return Err(GlmError::InvalidData("no observations".into()));
        }
        Ok(Self { covariates, patterns: out })
    }

    /// Individual-level rows `(y, covariate values, weight)` with `y` in {0, 1}.
    pub fn from_rows(covariates: Vec<String>, rows: &[(f64, Vec<f64>, f64)]) -> Result<Self> {
        let mut patterns = Vec::with_capacity(rows.len());
        for (y, values, w) in rows {
            if *y != 0.0 && *y != 1.0 {
                return Err(GlmError::InvalidData(format!("outcome must be 0 or 1, got {y}")));
            }
            if !(*w > 0.0) {
                return Err(GlmError::InvalidData(format!("weights must be positive, got {w}")));
            }
            patterns.push(Pattern { values: values.clone(), events: y * w, trials: *w });
        }
        Self::from_patterns(covariates, patterns)
    }

    pub fn covariates(&self) -> &[String] {
        &self.covariates
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn total_trials(&self) -> f64 {
        self.patterns.iter().map(|p| p.trials).sum()
    }

    pub fn total_events(&self) -> f64 {
        self.patterns.iter().map(|p| p.events).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c == name)
    }

    /// Keep only patterns where `covariate == value`.
    pub fn subset(&self, covariate: &str, value: f64) -> Result<Self> {
        let j = self.index_of(covariate).ok_or_else(|| GlmError::MissingTerm(covariate.to_string()))?;
        let patterns = self.patterns.iter().filter(|p| p.values[j] == value).cloned().collect();
        Self::from_patterns(self.covariates.clone(), patterns)
    }

    fn signature(&self) -> (usize, u64, u64) {
        (self.patterns.len(), self.total_trials().to_bits(), self.total_events().to_bits())
    }
}

fn design_row(spec: &ModelSpec, covariates: &[String], values: &[f64]) -> Result<Vec<f64>> {
    let get = |n: &str| {
        covariates
            .iter()
            .position(|c| c == n)
            .map(|j| values[j])
            .ok_or_else(|| GlmError::MissingTerm(n.to_string()))
    };
    let mut row = Vec::with_capacity(spec.terms.len() + 1);
    row.push(1.0);
    for t in &spec.terms {
        row.push(match t {
            Term::Main(a) => get(a)?,
            Term::Product(a, b) => get(a)? * get(b)?,
        });
    }
    Ok(row)
}

fn design_matrix(spec: &ModelSpec, data: &Dataset) -> Result<DMatrix<f64>> {
    let p = spec.terms.len() + 1;
    let mut x = DMatrix::zeros(data.patterns.len(), p);
    for (i, pat) in data.patterns.iter().enumerate() {
        for (j, v) in design_row(spec, &data.covariates, &pat.values)?.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub deviance: f64,
    pub max_fitted: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub spec: ModelSpec,
    pub covariates: Vec<String>,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub deviance: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_max: f64,
    /// One record per accepted iterate, starting with the initial values.
    pub trace: Vec<IterationRecord>,
    data_signature: (usize, u64, u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub exp_estimate: f64,
    pub exp_ci_low: f64,
    pub exp_ci_high: f64,
}

impl GlmFit {
    fn index(&self, name: &str) -> Option<usize> {
        let t: Term = name.parse().ok()?;
        let target = t.name();
        self.names.iter().position(|n| *n == target).or_else(|| {
            // Product terms match in either order.
            self.spec.terms.iter().position(|u| u.same_as(&t)).map(|i| i + 1)
        })
    }

    pub fn coef(&self, name: &str) -> Result<f64> {
        self.index(name).map(|i| self.coefficients[i]).ok_or_else(|| GlmError::MissingTerm(name.into()))
    }

    pub fn exp_coef(&self, name: &str) -> Result<f64> {
        self.coef(name).map(f64::exp)
    }

    pub fn se(&self, name: &str) -> Result<f64> {
        self.index(name).map(|i| self.covariance[i][i].sqrt()).ok_or_else(|| GlmError::MissingTerm(name.into()))
    }

    /// Coefficient table with Wald intervals on the exponentiated scale.
    pub fn summary(&self, level: f64) -> Vec<CoefficientSummary> {
        let z = z_crit(level);
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let b = self.coefficients[i];
                let se = self.covariance[i][i].sqrt();
                CoefficientSummary {
                    name: n.clone(),
                    estimate: b,
                    se,
                    exp_estimate: b.exp(),
                    exp_ci_low: (b - z * se).exp(),
                    exp_ci_high: (b + z * se).exp(),
                }
            })
            .collect()
    }

    /// Fitted risk for covariate values in `self.covariates` order.
    pub fn predict(&self, values: &[f64]) -> Result<f64> {
        let row = design_row(&self.spec, &self.covariates, values)?;
        let eta: f64 = row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum();
        Ok(self.spec.link.inverse(eta))
    }
}

struct Evaluation {
    eta: DVector<f64>,
    mu: DVector<f64>,
    deviance: f64,
    loglik: f64,
}

fn evaluate(link: Link, x: &DMatrix<f64>, data: &Dataset, beta: &DVector<f64>) -> Evaluation {
    let eta = x * beta;
    let mu = eta.map(|e| link.inverse(e));
    let mut deviance = 0.0;
    let mut loglik = 0.0;
    for (i, p) in data.patterns.iter().enumerate() {
        let (lp, lq) = link.log_probs(eta[i]);
        let (y, n) = (p.events, p.trials);
        if y > 0.0 {
            loglik += y * lp;
            deviance += 2.0 * y * ((y / n).ln() - lp);
        }
        if n - y > 0.0 {
            loglik += (n - y) * lq;
            deviance += 2.0 * (n - y) * (((n - y) / n).ln() - lq);
        }
    }
    Evaluation { eta, mu, deviance, loglik }
}

/// Score vector `∂ℓ/∂β`.
fn gradient(link: Link, x: &DMatrix<f64>, data: &Dataset, ev: &Evaluation) -> DVector<f64> {
    let r = DVector::from_iterator(
        data.patterns.len(),
        data.patterns.iter().enumerate().map(|(i, p)| {
            let mu = ev.mu[i];
            let dmu = link.derivative(ev.eta[i], mu);
            (p.events - p.trials * mu) * dmu / (mu * (1.0 - mu))
        }),
    );
    x.transpose() * r
}

fn fisher_information(link: Link, x: &DMatrix<f64>, data: &Dataset, ev: &Evaluation) -> DMatrix<f64> {
    let w = DVector::from_iterator(
        data.patterns.len(),
        data.patterns.iter().enumerate().map(|(i, p)| {
            let mu = ev.mu[i];
            let dmu = link.derivative(ev.eta[i], mu);
            p.trials * dmu * dmu / (mu * (1.0 - mu))
        }),
    );
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    x.transpose() * xw
}

fn feasible(link: Link, ev: &Evaluation) -> bool {
    ev.deviance.is_finite()
        && match link {
            Link::Logit => true,
            Link::Log => ev.mu.iter().all(|&m| m <= LOG_LINK_CEILING),
        }
}

fn check_rank(x: &DMatrix<f64>, data: &Dataset) -> Result<()> {
    let mut xs = x.clone();
    for (i, mut row) in xs.row_iter_mut().enumerate() {
        row *= data.patterns[i].trials.sqrt();
    }
    if xs.nrows() < xs.ncols() {
        return Err(GlmError::RankDeficient);
    }
    let sv = xs.svd(false, false).singular_values;
    let max = sv.max();
    if sv.iter().any(|&s| s <= max * 1e-10) {
        return Err(GlmError::RankDeficient);
    }
    Ok(())
}

/// Maximum-likelihood fit of a binomial GLM.
pub fn fit(data: &Dataset, spec: &ModelSpec) -> Result<GlmFit> {
    let link = spec.link;
    let x = design_matrix(spec, data)?;
    check_rank(&x, data)?;
    let p = x.ncols();

    let mut beta = DVector::zeros(p);
    if link == Link::Log {
        let mean = data.total_events() / data.total_trials();
        beta[0] = mean.max(1e-8).ln() - 1e-3;
    }
    let mut ev = evaluate(link, &x, data, &beta);
    let mut trace = vec![IterationRecord { deviance: ev.deviance, max_fitted: ev.mu.max(), halvings: 0 }];
    let mut converged = false;
    let mut iterations = 0;
    let mut stalled = false;

    while iterations < MAX_ITER {
        iterations += 1;
        let info = fisher_information(link, &x, data, &ev);
        let score = gradient(link, &x, data, &ev);
        let chol = match info.cholesky() {
            Some(c) => c,
            None => {
                stalled = true;
                break;
            }
        };
        let step = chol.solve(&score);

        let mut t = 1.0;
        let mut accepted = None;
        for halvings in 0..=MAX_HALVINGS {
            let cand = &beta + &step * t;
            let cev = evaluate(link, &x, data, &cand);
            if feasible(link, &cev) && cev.deviance <= ev.deviance + 1e-12 * ev.deviance.abs().max(1.0) {
                accepted = Some((cand, cev, halvings));
                break;
            }
            t *= 0.5;
        }
        let Some((nb, nev, halvings)) = accepted else {
            stalled = true;
            break;
        };
        let rel = (nev.deviance - ev.deviance).abs() / (nev.deviance.abs() + 0.1);
        beta = nb;
        ev = nev;
        trace.push(IterationRecord { deviance: ev.deviance, max_fitted: ev.mu.max(), halvings });
        let gmax = gradient(link, &x, data, &ev).amax();
        if gmax < GRADIENT_TOL || (rel < DEVIANCE_RTOL && gmax < GRADIENT_CEILING) {
            converged = true;
            break;
        }
    }

    let gradient_max = gradient(link, &x, data, &ev).amax();
    let info = fisher_information(link, &x, data, &ev);
    let covariance = info
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| info.try_inverse())
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let names = spec.coefficient_names();

    if link == Link::Logit {
        let saturated_prob = ev
            .mu
            .iter()
            .any(|&m| m < 1e-8 || m > 1.0 - 1e-8);
        if let Some(j) = (0..p).find(|&j| beta[j].abs() > SEPARATION_BOUND).or(saturated_prob.then(|| {
            (0..p).max_by(|&a, &b| beta[a].abs().total_cmp(&beta[b].abs())).unwrap_or(0)
        })) {
            return Err(GlmError::Separation(names[j].clone()));
        }
    }

    let fit = GlmFit {
        spec: spec.clone(),
        covariates: data.covariates.clone(),
        names,
        coefficients: beta.iter().copied().collect(),
        covariance: (0..p).map(|i| (0..p).map(|j| covariance[(i, j)]).collect()).collect(),
        deviance: ev.deviance,
        loglik: ev.loglik,
        iterations,
        converged,
        gradient_max,
        trace,
        data_signature: data.signature(),
    };

    if link == Link::Log && ev.mu.max() > 1.0 - 1e-6 && (stalled || !converged || gradient_max > 1e-4) {
        let mut f = fit;
        f.converged = false;
        return Err(GlmError::Boundary(Box::new(f)));
    }
    if !fit.converged {
        log::warn!("IRLS did not converge after {iterations} iterations (max |score| {gradient_max:e})");
    }
    Ok(fit)
}

/// Log-likelihood of `data` under coefficients `beta` (no binomial constant).
pub fn loglik_at(data: &Dataset, spec: &ModelSpec, beta: &[f64]) -> Result<f64> {
    let x = design_matrix(spec, data)?;
    Ok(evaluate(spec.link, &x, data, &DVector::from_column_slice(beta)).loglik)
}

/// Analytic score at `beta`.
pub fn score_at(data: &Dataset, spec: &ModelSpec, beta: &[f64]) -> Result<Vec<f64>> {
    let x = design_matrix(spec, data)?;
    let ev = evaluate(spec.link, &x, data, &DVector::from_column_slice(beta));
    Ok(gradient(spec.link, &x, data, &ev).iter().copied().collect())
}

/// Measure for `term` at a given level of `modifier`:
/// `exp(β_term + level · β_term:modifier)`.
pub fn stratum_effect(fit: &GlmFit, term: &str, modifier: &str, modifier_level: f64) -> Result<f64> {
    if !fit.converged {
        return Err(GlmError::NotConverged);
    }
    let main = fit.coef(term)?;
    if !fit.spec.contains(&Term::Main(modifier.to_string())) {
        return Err(GlmError::MissingTerm(modifier.to_string()));
    }
    let product = Term::Product(term.to_string(), modifier.to_string());
    let inter = if fit.spec.contains(&product) { fit.coef(&product.name())? } else { 0.0 };
    if modifier_level == 0.0 {
        return Ok(main.exp());
    }
    Ok((main + modifier_level * inter).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub note: String,
}

/// Likelihood-ratio test of a reduced model nested in a full model.
pub fn lrt(full: &GlmFit, reduced: &GlmFit) -> Result<LrtResult> {
    if full.spec.link != reduced.spec.link {
        return Err(GlmError::Nesting("links differ".into()));
    }
    if full.data_signature != reduced.data_signature {
        return Err(GlmError::Nesting("models were fitted to different data".into()));
    }
    if let Some(t) = reduced.spec.terms.iter().find(|t| !full.spec.contains(t)) {
        return Err(GlmError::Nesting(format!("term '{}' is not in the full model", t.name())));
    }
    let df = full.spec.terms.len() - reduced.spec.terms.len();
    let statistic = (2.0 * (full.loglik - reduced.loglik)).max(0.0);
    Ok(LrtResult { statistic, df, p_value: chisq_sf(statistic, df), note: LRT_NOTE.to_string() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizeOptions {
    pub resamples: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for StandardizeOptions {
    fn default() -> Self {
        Self { resamples: 2000, seed: 20210601, level: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizedMeasure {
    /// Point from the original fit; `se` is the bootstrap standard deviation
    /// on the analysis scale and the interval is the matching Wald interval.
    pub estimate: EffectEstimate,
    pub percentile_low: f64,
    pub percentile_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    pub risk_exposed: f64,
    pub risk_unexposed: f64,
    pub or: StandardizedMeasure,
    pub rr: StandardizedMeasure,
    pub rd: StandardizedMeasure,
    pub resamples_used: usize,
    pub resamples_failed: usize,
}

/// Average fitted risks with the exposure set to 1 and to 0 over the
/// trial-weighted covariate distribution of `data`.
pub fn standardized_risks(fit: &GlmFit, data: &Dataset, exposure: &str) -> Result<(f64, f64)> {
    let j = fit
        .covariates
        .iter()
        .position(|c| c == exposure)
        .ok_or_else(|| GlmError::MissingTerm(exposure.to_string()))?;
    if data.covariates != fit.covariates {
        return Err(GlmError::InvalidData("dataset covariates differ from the fitted model".into()));
    }
    let (mut r1, mut r0, mut w) = (0.0, 0.0, 0.0);
    for p in &data.patterns {
        let mut v = p.values.clone();
        v[j] = 1.0;
        r1 += p.trials * fit.predict(&v)?;
        v[j] = 0.0;
        r0 += p.trials * fit.predict(&v)?;
        w += p.trials;
    }
    Ok((r1 / w, r0 / w))
}

/// Marginal (population-averaged) OR, RR and RD by standardization, with
/// nonparametric bootstrap intervals over individual rows.
pub fn standardize(fit: &GlmFit, data: &Dataset, exposure: &str, opts: &StandardizeOptions) -> Result<Standardized> {
    if !fit.converged {
        return Err(GlmError::NotConverged);
    }
    let j = data.index_of(exposure).ok_or_else(|| GlmError::MissingTerm(exposure.to_string()))?;
    if data.patterns.iter().any(|p| p.values[j] != 0.0 && p.values[j] != 1.0) {
        return Err(GlmError::InvalidData(format!("exposure '{exposure}' must be binary")));
    }
    let (r1, r0) = standardized_risks(fit, data, exposure)?;

    // Cells: (pattern, event) and (pattern, non-event), weighted by count.
    let cells: Vec<(usize, bool, f64)> = data
        .patterns
        .iter()
        .enumerate()
        .flat_map(|(i, p)| [(i, true, p.events), (i, false, p.trials - p.events)])
        .filter(|c| c.2 > 0.0)
        .collect();
    let mut cum = Vec::with_capacity(cells.len());
    let mut acc = 0.0;
    for c in &cells {
        acc += c.2;
        cum.push(acc);
    }
    let total = acc;
    let n_rows = total.round().max(1.0) as usize;

    let draws: Vec<Option<[f64; 3]>> = (0..opts.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(b as u64);
            let mut counts = vec![0.0; cells.len()];
            for _ in 0..n_rows {
                let u = rng.random::<f64>() * total;
                let k = cum.partition_point(|&c| c <= u).min(cells.len() - 1);
                counts[k] += 1.0;
            }
            let mut pats: Vec<Pattern> = Vec::new();
            for (k, &(i, ev, _)) in cells.iter().enumerate() {
                if counts[k] == 0.0 {
                    continue;
                }
                pats.push(Pattern {
                    values: data.patterns[i].values.clone(),
                    events: if ev { counts[k] } else { 0.0 },
                    trials: counts[k],
                });
            }
            let boot = Dataset::from_patterns(data.covariates.clone(), pats).ok()?;
            let bf = crate::glm::fit(&boot, &fit.spec).ok()?;
            if !bf.converged {
                return None;
            }
            let (b1, b0) = standardized_risks(&bf, &boot, exposure).ok()?;
            let vals = [EffectKind::Or, EffectKind::Rr, EffectKind::Rd]
                .map(|k| k.to_transformed(k.from_risks(b1, b0)));
            vals.iter().all(|v| v.is_finite()).then_some(vals)
        })
        .collect();

    let ok: Vec<[f64; 3]> = draws.iter().flatten().copied().collect();
    let failed = draws.len() - ok.len();
    let lo_q = (1.0 - opts.level) / 2.0;
    let measure = |m: usize, kind: EffectKind| {
        let center = kind.to_transformed(kind.from_risks(r1, r0));
        let mut v: Vec<f64> = ok.iter().map(|d| d[m]).collect();
        v.sort_by(f64::total_cmp);
        let (se, pl, ph) = if v.len() >= 2 {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (var.sqrt(), quantile_sorted(&v, lo_q), quantile_sorted(&v, 1.0 - lo_q))
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        StandardizedMeasure {
            estimate: EffectEstimate::from_transformed(kind, center, se, opts.level),
            percentile_low: kind.from_transformed(pl),
            percentile_high: kind.from_transformed(ph),
        }
    };
    Ok(Standardized {
        risk_exposed: r1,
        risk_unexposed: r0,
        or: measure(0, EffectKind::Or),
        rr: measure(1, EffectKind::Rr),
        rd: measure(2, EffectKind::Rd),
        resamples_used: ok.len(),
        resamples_failed: failed,
    })
}

/// Build the X/Z dataset from two strata of 2×2 counts,
/// each `(exposed events, exposed non-events, unexposed events, unexposed non-events)`.
pub fn two_strata_dataset(z1: [f64; 4], z0: [f64; 4]) -> Dataset {
    let pat = |x: f64, z: f64, e: f64, ne: f64| Pattern { values: vec![x, z], events: e, trials: e + ne };
    Dataset::from_patterns(
        vec!["X".into(), "Z".into()],
        vec![
            pat(1.0, 1.0, z1[0], z1[1]),
            pat(0.0, 1.0, z1[2], z1[3]),
            pat(1.0, 0.0, z0[0], z0[1]),
            pat(0.0, 0.0, z0[2], z0[3]),
        ],
    )
    .expect("valid strata")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Binomial, Distribution};

    const T1A: ([f64; 4], [f64; 4]) = ([80., 20., 60., 40.], [40., 60., 20., 80.]);
    const T1B: ([f64; 4], [f64; 4]) = ([60., 40., 30., 70.], [40., 60., 20., 80.]);

    fn saturated(link: Link) -> ModelSpec {
        ModelSpec::parse(link, "X,Z,X:Z").unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::parse(Link::Logit, "X,X:Z").is_err());
        assert!(ModelSpec::parse(Link::Logit, "X,Z,X:Z,Z:X").is_err());
        assert!(ModelSpec::parse(Link::Logit, "X,X").is_err());
        let s = ModelSpec::parse(Link::Logit, "X, Z, X#Z").unwrap();
        assert_eq!(s.coefficient_names(), vec!["(Intercept)", "X", "Z", "X:Z"]);
    }

    #[test]
    fn table1_1b_logit_interaction() {
        let d = two_strata_dataset(T1B.0, T1B.1);
        let f = fit(&d, &saturated(Link::Logit)).unwrap();
        assert!(f.converged);
        close(f.exp_coef("X").unwrap(), 8.0 / 3.0, 1e-8);
        close(f.exp_coef("Z").unwrap(), 12.0 / 7.0, 1e-8);
        close(f.exp_coef("X:Z").unwrap(), 3.5 / (8.0 / 3.0), 1e-8);
        close(stratum_effect(&f, "X", "Z", 1.0).unwrap(), 3.5, 1e-8);
    }

    #[test]
    fn table1_1a_log_interaction() {
        let d = two_strata_dataset(T1A.0, T1A.1);
        let f = fit(&d, &saturated(Link::Log)).unwrap();
        assert!(f.converged);
        close(f.exp_coef("X").unwrap(), 2.0, 1e-8);
        close(f.exp_coef("Z").unwrap(), 3.0, 1e-8);
        close(f.exp_coef("X:Z").unwrap(), 2.0 / 3.0, 1e-8);
        close(stratum_effect(&f, "Z", "X", 1.0).unwrap(), 2.0, 1e-8);
        assert_eq!(stratum_effect(&f, "Z", "X", 0.0).unwrap(), f.exp_coef("Z").unwrap());
    }

    #[test]
    fn null_association() {
        let d = two_strata_dataset([30., 70., 30., 70.], [30., 70., 30., 70.]);
        for link in [Link::Logit, Link::Log] {
            let f = fit(&d, &saturated(link)).unwrap();
            for n in ["X", "Z", "X:Z"] {
                close(f.exp_coef(n).unwrap(), 1.0, 1e-8);
            }
        }
    }

    #[test]
    fn univariate_matches_crude_tables() {
        let d = two_strata_dataset(T1A.0, T1A.1);
        let or = fit(&d, &ModelSpec::parse(Link::Logit, "X").unwrap()).unwrap();
        close(or.exp_coef("X").unwrap(), 2.25, 1e-8);
        let rr = fit(&d, &ModelSpec::parse(Link::Log, "X").unwrap()).unwrap();
        close(rr.exp_coef("X").unwrap(), 1.5, 1e-8);
    }

    #[test]
    fn rows_and_patterns_fit_identically() {
        let grouped = two_strata_dataset(T1B.0, T1B.1);
        let mut rows = Vec::new();
        for p in grouped.patterns() {
            for _ in 0..p.events as usize {
                rows.push((1.0, p.values.clone(), 1.0));
            }
            for _ in 0..(p.trials - p.events) as usize {
                rows.push((0.0, p.values.clone(), 1.0));
            }
        }
        let expanded = Dataset::from_rows(vec!["X".into(), "Z".into()], &rows).unwrap();
        for link in [Link::Logit, Link::Log] {
            let a = fit(&grouped, &saturated(link)).unwrap();
            let b = fit(&expanded, &saturated(link)).unwrap();
            for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
                close(*x, *y, 1e-10);
            }
            close(a.loglik, b.loglik, 1e-8);
        }
    }

    #[test]
    fn analytic_score_matches_finite_differences() {
        let d = two_strata_dataset(T1A.0, T1A.1);
        for link in [Link::Logit, Link::Log] {
            let spec = ModelSpec::parse(link, "X,Z").unwrap();
            let f = fit(&d, &spec).unwrap();
            // Away from the optimum as well as at it.
            for shift in [0.0, 0.05] {
                let beta: Vec<f64> = f.coefficients.iter().map(|b| b - shift).collect();
                let g = score_at(&d, &spec, &beta).unwrap();
                for j in 0..beta.len() {
                    let h = 1e-6;
                    let mut up = beta.clone();
                    up[j] += h;
                    let mut dn = beta.clone();
                    dn[j] -= h;
                    let fd = (loglik_at(&d, &spec, &up).unwrap() - loglik_at(&d, &spec, &dn).unwrap()) / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-4, "{link} coef {j}: {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn deviance_non_increasing_and_log_link_feasible() {
        for (z1, z0) in [T1A, T1B] {
            let d = two_strata_dataset(z1, z0);
            for spec in [saturated(Link::Log), ModelSpec::parse(Link::Log, "X,Z").unwrap(), saturated(Link::Logit)] {
                let f = fit(&d, &spec).unwrap();
                for w in f.trace.windows(2) {
                    assert!(w[1].deviance <= w[0].deviance + 1e-12 * w[0].deviance.max(1.0));
                }
                if spec.link == Link::Log {
                    assert!(f.trace.iter().all(|r| r.max_fitted <= 1.0));
                }
                assert!(f.gradient_max < 1e-6, "{} {:?} {} iters", f.gradient_max, spec, f.iterations);
            }
        }
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let d = two_strata_dataset(T1B.0, T1B.1);
        let f = fit(&d, &saturated(Link::Logit)).unwrap();
        let m = DMatrix::from_fn(4, 4, |i, j| f.covariance[i][j]);
        assert!((&m - m.transpose()).amax() < 1e-12);
        assert!(m.symmetric_eigenvalues().iter().all(|&e| e > -1e-12));
        // Saturated logit SE of X equals the tabular log-OR SE in the Z = 0 stratum.
        close(f.se("X").unwrap(), (1.0f64 / 40.0 + 1.0 / 60.0 + 1.0 / 20.0 + 1.0 / 80.0).sqrt(), 1e-8);
    }

    #[test]
    fn rank_deficiency_detected() {
        let d = Dataset::from_patterns(
            vec!["X".into(), "W".into()],
            vec![
                Pattern { values: vec![1.0, 2.0], events: 3.0, trials: 10.0 },
                Pattern { values: vec![0.0, 0.0], events: 5.0, trials: 10.0 },
            ],
        )
        .unwrap();
        assert!(matches!(fit(&d, &ModelSpec::parse(Link::Logit, "X,W").unwrap()), Err(GlmError::RankDeficient)));
    }

    #[test]
    fn separation_detected() {
        let d = Dataset::from_patterns(
            vec!["X".into()],
            vec![
                Pattern { values: vec![1.0], events: 10.0, trials: 10.0 },
                Pattern { values: vec![0.0], events: 4.0, trials: 10.0 },
            ],
        )
        .unwrap();
        assert!(matches!(fit(&d, &ModelSpec::parse(Link::Logit, "X").unwrap()), Err(GlmError::Separation(_))));
    }

    #[test]
    fn log_link_boundary_reported() {
        let d = Dataset::from_patterns(
            vec!["X".into()],
            vec![
                Pattern { values: vec![1.0], events: 10.0, trials: 10.0 },
                Pattern { values: vec![0.0], events: 4.0, trials: 10.0 },
            ],
        )
        .unwrap();
        match fit(&d, &ModelSpec::parse(Link::Log, "X").unwrap()) {
            Err(GlmError::Boundary(f)) => {
                assert!(!f.converged);
                assert!(f.trace.iter().all(|r| r.max_fitted <= LOG_LINK_CEILING));
            }
            other => panic!("expected boundary error, got {other:?}"),
        }
    }

    #[test]
    fn missing_term() {
        let d = two_strata_dataset(T1A.0, T1A.1);
        let f = fit(&d, &ModelSpec::parse(Link::Logit, "X").unwrap()).unwrap();
        assert!(matches!(stratum_effect(&f, "W", "Z", 1.0), Err(GlmError::MissingTerm(_))));
        assert!(matches!(stratum_effect(&f, "X", "Z", 1.0), Err(GlmError::MissingTerm(_))));
    }

    #[test]
    fn lrt_identical_models() {
        let d = two_strata_dataset(T1B.0, T1B.1);
        let f = fit(&d, &saturated(Link::Logit)).unwrap();
        let r = lrt(&f, &f).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.df, 0);
        assert_eq!(r.p_value, 1.0);
        assert!(r.note.contains("discouraged"));
    }

    #[test]
    fn lrt_1a_logit_interaction_is_null() {
        let d = two_strata_dataset(T1A.0, T1A.1);
        let full = fit(&d, &saturated(Link::Logit)).unwrap();
        let reduced = fit(&d, &ModelSpec::parse(Link::Logit, "X,Z").unwrap()).unwrap();
        let r = lrt(&full, &reduced).unwrap();
        assert_eq!(r.df, 1);
        assert!(r.statistic < 1e-8, "{}", r.statistic);
        assert!(r.p_value > 0.999);
    }

    #[test]
    fn lrt_rejects_non_nested() {
        let d = two_strata_dataset(T1A.0, T1A.1);
        let a = fit(&d, &ModelSpec::parse(Link::Logit, "X").unwrap()).unwrap();
        let b = fit(&d, &ModelSpec::parse(Link::Logit, "Z").unwrap()).unwrap();
        assert!(matches!(lrt(&a, &b), Err(GlmError::Nesting(_))));
        let c = fit(&d, &ModelSpec::parse(Link::Log, "X").unwrap()).unwrap();
        assert!(matches!(lrt(&c, &a), Err(GlmError::Nesting(_))));
        let other = two_strata_dataset(T1B.0, T1B.1);
        let e = fit(&other, &ModelSpec::parse(Link::Logit, "X,Z").unwrap()).unwrap();
        assert!(matches!(lrt(&e, &a), Err(GlmError::Nesting(_))));
    }

    #[test]
    fn lrt_detects_strong_product_term() {
        // n = 4000 individuals, true exp(β_X:Z) = 3.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b0, bx, bz, bxz) = (-1.0, 0.3, 0.2, 3f64.ln());
        let mut pats = Vec::new();
        for (x, z) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
            let p = expit(b0 + bx * x + bz * z + bxz * x * z);
            let y = Binomial::new(1000, p).unwrap().sample(&mut rng) as f64;
            pats.push(Pattern { values: vec![x, z], events: y, trials: 1000.0 });
        }
        let d = Dataset::from_patterns(vec!["X".into(), "Z".into()], pats).unwrap();
        let full = fit(&d, &saturated(Link::Logit)).unwrap();
        let reduced = fit(&d, &ModelSpec::parse(Link::Logit, "X,Z").unwrap()).unwrap();
        let r = lrt(&full, &reduced).unwrap();
        assert!(r.p_value < 0.01, "p = {}", r.p_value);
    }

    #[test]
    fn standardization_1a() {
        let d = two_strata_dataset(T1A.0, T1A.1);
        let f = fit(&d, &saturated(Link::Logit)).unwrap();
        let s = standardize(&f, &d, "X", &StandardizeOptions { resamples: 400, ..Default::default() }).unwrap();
        close(s.risk_exposed, 0.6, 1e-9);
        close(s.risk_unexposed, 0.4, 1e-9);
        close(s.rr.estimate.point, 1.5, 1e-8);
        close(s.or.estimate.point, 2.25, 1e-8);
        close(s.rd.estimate.point, 0.2, 1e-9);
        assert_eq!(s.resamples_used + s.resamples_failed, 400);
        assert!(s.rr.percentile_low < 1.5 && 1.5 < s.rr.percentile_high);
        assert!(s.or.estimate.ci_low < 2.25 && s.or.estimate.ci_high > 2.25);
        // Bootstrap SE of log RR is in the neighbourhood of the crude Wald SE.
        let wald = (1.0f64 / 120.0 - 1.0 / 200.0 + 1.0 / 80.0 - 1.0 / 200.0).sqrt();
        assert!((s.rr.estimate.se / wald - 1.0).abs() < 0.25, "{} vs {wald}", s.rr.estimate.se);
    }

    #[test]
    fn standardization_is_seeded() {
        let d = two_strata_dataset(T1B.0, T1B.1);
        let f = fit(&d, &saturated(Link::Log)).unwrap();
        let o = StandardizeOptions { resamples: 100, seed: 3, level: 0.9 };
        assert_eq!(standardize(&f, &d, "X", &o).unwrap(), standardize(&f, &d, "X", &o).unwrap());
    }

    #[test]
    fn standardization_null() {
        let d = two_strata_dataset([20., 80., 20., 80.], [50., 50., 50., 50.]);
        let f = fit(&d, &saturated(Link::Logit)).unwrap();
        let s = standardize(&f, &d, "X", &StandardizeOptions { resamples: 50, ..Default::default() }).unwrap();
        close(s.rr.estimate.point, 1.0, 1e-9);
        close(s.or.estimate.point, 1.0, 1e-9);
        close(s.rd.estimate.point, 0.0, 1e-9);
    }

    #[test]
    fn standardization_under_confounding() {
        // Z = 1 is mostly exposed and carries higher risk.
        let z1 = [63., 27., 5., 5.]; // exposed 90 (risk .7), unexposed 10 (risk .5)
        let z0 = [3., 7., 18., 72.]; // exposed 10 (risk .3), unexposed 90 (risk .2)
        let d = two_strata_dataset(z1, z0);
        let f = fit(&d, &saturated(Link::Logit)).unwrap();
        let (r1, r0) = standardized_risks(&f, &d, "X").unwrap();
        // Direct standardization to P(Z=1) = 0.5.
        let oracle1 = 0.5 * 0.7 + 0.5 * 0.3;
        let oracle0 = 0.5 * 0.5 + 0.5 * 0.2;
        close(r1, oracle1, 1e-9);
        close(r0, oracle0, 1e-9);
        let crude_rr = (66.0 / 100.0) / (23.0 / 100.0);
        assert!((r1 / r0 - crude_rr).abs() > 0.5);
    }
}

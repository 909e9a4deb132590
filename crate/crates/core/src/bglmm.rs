//! Bivariate generalized linear mixed model for one meta-analysis.
//!
//! For study `i` with control arm `x_{i0}/n_{i0}` and treatment arm
//! `x_{i1}/n_{i1}`:
//!
//! ```text
//! x_{ig} ~ Binomial(n_{ig}, expit(μ_g + ν_{ig})),   g = 0, 1
//! (ν_{i0}, ν_{i1}) ~ N₂(0, [[σ0², ρσ0σ1], [ρσ0σ1, σ1²]])
//! ```
//!
//! The per-study integral is evaluated by tensor-product Gauss–Hermite
//! quadrature after decorrelating the random effects, recentred at the mode
//! of each study's integrand and rescaled by its curvature. The likelihood
//! is maximized over `(μ0, μ1, ln σ0, ln σ1, atanh ρ)`.

use nalgebra::{Matrix2, Matrix5, SMatrix, Vector2, Vector5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::meta::{MetaError, StudyRow};
use crate::optim::{bfgs, numeric_gradient, numeric_hessian, BfgsOptions};
use crate::quadrature::GaussHermite;
use crate::stats::{expit, log_sum_exp, logit, quantile_sorted, softplus};
use crate::tabular::{EffectEstimate, EffectKind};

pub const DEFAULT_ORDER: usize = 20;
pub const MIN_ORDER: usize = 5;
/// Quadrature order for marginal and conditional risks.
pub const RISK_ORDER: usize = 80;
pub const LOG_SIGMA_FLOOR: f64 = -13.815_510_557_964_274; // ln(1e-6)
const ATANH_RHO_BOUND: f64 = 8.0;
pub const MAX_ITER: usize = 500;
pub const GRADIENT_TOL: f64 = 1e-5;
const GRADIENT_STEP: f64 = 1e-5;
const HESSIAN_STEP: f64 = 1e-4;
pub const START_RHOS: [f64; 3] = [-0.5, 0.0, 0.5];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BglmmError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("quadrature order must be at least {MIN_ORDER}, got {0}")]
    InvalidOrder(usize),
    #[error("need at least {min} studies, got {got}")]
    TooFewStudies { min: usize, got: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("integral underflows for study '{0}'")]
    NumericalUnderflow(String),
    #[error("optimizer did not converge from any start within {MAX_ITER} iterations")]
    NonConvergence,
    #[error("parameter covariance unavailable (singular Hessian)")]
    CovarianceUnavailable,
    #[error("baseline risk grid must lie in (0,1)")]
    InvalidGrid,
    #[error(transparent)]
    Meta(#[from] MetaError),
}

pub type Result<T> = std::result::Result<T, BglmmError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BglmmParams {
    pub mu0: f64,
    pub mu1: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub rho: f64,
}

impl BglmmParams {
    pub fn new(mu0: f64, mu1: f64, sigma0: f64, sigma1: f64, rho: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma1 > 0.0) || !(rho.abs() < 1.0) || !mu0.is_finite() || !mu1.is_finite() {
            return Err(BglmmError::InvalidParams(format!(
                "need sigma > 0 and |rho| < 1, got sigma0={sigma0}, sigma1={sigma1}, rho={rho}"
            )));
        }
        Ok(Self { mu0, mu1, sigma0, sigma1, rho })
    }

    pub fn to_unconstrained(&self) -> [f64; 5] {
        [self.mu0, self.mu1, self.sigma0.ln(), self.sigma1.ln(), self.rho.atanh()]
    }

    /// Inverse of [`Self::to_unconstrained`]; `ln σ` is floored at
    /// [`LOG_SIGMA_FLOOR`] and `atanh ρ` clamped to keep `|ρ| < 1`.
    pub fn from_unconstrained(theta: &[f64]) -> Self {
        Self {
            mu0: theta[0],
            mu1: theta[1],
            sigma0: theta[2].max(LOG_SIGMA_FLOOR).exp(),
            sigma1: theta[3].max(LOG_SIGMA_FLOOR).exp(),
            rho: theta[4].clamp(-ATANH_RHO_BOUND, ATANH_RHO_BOUND).tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Arm {
    x: f64,
    n: f64,
    log_choose: f64,
}

impl Arm {
    fn new(x: u64, n: u64) -> Self {
        let (x, n) = (x as f64, n as f64);
        Self { x, n, log_choose: ln_gamma(n + 1.0) - ln_gamma(x + 1.0) - ln_gamma(n - x + 1.0) }
    }

    /// Binomial log-pmf at success probability `expit(eta)`.
    fn log_pmf(&self, eta: f64) -> f64 {
        self.log_choose + self.x * eta - self.n * softplus(eta)
    }
}

#[derive(Debug, Clone)]
struct StudyData {
    id: String,
    control: Arm,
    treatment: Arm,
}

fn prepare(studies: &[StudyRow]) -> Result<Vec<StudyData>> {
    let mut out = studies
        .iter()
        .map(|s| {
            s.validate()?;
            Ok((
                (s.c_events, s.c_total, s.t_events, s.t_total),
                StudyData {
                    id: s.study_id.clone(),
                    control: Arm::new(s.c_events, s.c_total),
                    treatment: Arm::new(s.t_events, s.t_total),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    // Canonical order keeps sums independent of input order.
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out.into_iter().map(|(_, d)| d).collect())
}

/// Quadrature nodes in log-weight form.
struct Rule {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl Rule {
    fn new(order: usize) -> Self {
        let gh = GaussHermite::new(order);
        let log_weights = gh.weights.iter().zip(&gh.nodes).map(|(w, t)| w.ln() + t * t).collect();
        Self { nodes: gh.nodes, log_weights }
    }
}

/// The per-study integrand on the decorrelated scale `z ~ N₂(0, I)`:
/// `η0 = μ0 + a0·z`, `η1 = μ1 + a1·z`.
struct Integrand<'a> {
    s: &'a StudyData,
    mu0: f64,
    mu1: f64,
    a0: Vector2<f64>,
    a1: Vector2<f64>,
}

impl Integrand<'_> {
    fn log_value(&self, z: &Vector2<f64>) -> f64 {
        self.s.control.log_pmf(self.mu0 + self.a0.dot(z)) + self.s.treatment.log_pmf(self.mu1 + self.a1.dot(z))
            - 0.5 * z.norm_squared()
            - (2.0 * std::f64::consts::PI).ln()
    }

    fn grad_hess(&self, z: &Vector2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        let p0 = expit(self.mu0 + self.a0.dot(z));
        let p1 = expit(self.mu1 + self.a1.dot(z));
        let c0 = self.s.control.x - self.s.control.n * p0;
        let c1 = self.s.treatment.x - self.s.treatment.n * p1;
        let d0 = self.s.control.n * p0 * (1.0 - p0);
        let d1 = self.s.treatment.n * p1 * (1.0 - p1);
        let g = self.a0 * c0 + self.a1 * c1 - z;
        let h = -(self.a0 * self.a0.transpose()) * d0 - (self.a1 * self.a1.transpose()) * d1 - Matrix2::identity();
        (g, h)
    }

    /// Mode of the (strictly log-concave) integrand by damped Newton.
    fn mode(&self) -> (Vector2<f64>, Matrix2<f64>) {
        let mut z = Vector2::zeros();
        let mut fz = self.log_value(&z);
        for _ in 0..100 {
            let (g, h) = self.grad_hess(&z);
            let step = match h.try_inverse() {
                Some(inv) => -(inv * g),
                None => break,
            };
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand = z + step * t;
                let fc = self.log_value(&cand);
                if fc >= fz {
                    z = cand;
                    fz = fc;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved || (step * t).amax() < 1e-12 {
                break;
            }
        }
        let (_, h) = self.grad_hess(&z);
        (z, h)
    }
}

fn study_log_integral(p: &BglmmParams, s: &StudyData, rule: &Rule) -> Result<f64> {
    let r = (1.0 - p.rho * p.rho).max(0.0).sqrt();
    let f = Integrand {
        s,
        mu0: p.mu0,
        mu1: p.mu1,
        a0: Vector2::new(p.sigma0, 0.0),
        a1: Vector2::new(p.sigma1 * p.rho, p.sigma1 * r),
    };
    let (zhat, h) = f.mode();
    let neg_h = -h;
    let cov = neg_h.try_inverse().ok_or_else(|| BglmmError::NumericalUnderflow(s.id.clone()))?;
    let l = cov.cholesky().ok_or_else(|| BglmmError::NumericalUnderflow(s.id.clone()))?.l();
    let log_det_l = l[(0, 0)].ln() + l[(1, 1)].ln();
    let scale = l * std::f64::consts::SQRT_2;

    let n = rule.nodes.len();
    let mut terms = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            let t = Vector2::new(rule.nodes[j], rule.nodes[k]);
            let z = zhat + scale * t;
            terms.push(rule.log_weights[j] + rule.log_weights[k] + f.log_value(&z));
        }
    }
    let v = std::f64::consts::LN_2 + log_det_l + log_sum_exp(&terms);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(BglmmError::NumericalUnderflow(s.id.clone()))
    }
}

fn loglik_prepared(p: &BglmmParams, data: &[StudyData], rule: &Rule) -> Result<f64> {
    let parts: Vec<Result<f64>> = data.par_iter().map(|s| study_log_integral(p, s, rule)).collect();
    let mut total = 0.0;
    for v in parts {
        total += v?;
    }
    Ok(total)
}

/// Marginal log-likelihood of the studies under `params`.
pub fn loglik(params: &BglmmParams, studies: &[StudyRow], order: usize) -> Result<f64> {
    if order < MIN_ORDER {
        return Err(BglmmError::InvalidOrder(order));
    }
    if studies.is_empty() {
        return Err(BglmmError::TooFewStudies { min: 1, got: 0 });
    }
    let data = prepare(studies)?;
    loglik_prepared(params, &data, &Rule::new(order))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub rho: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BglmmFit {
    pub params: BglmmParams,
    pub unconstrained: [f64; 5],
    /// Covariance of the unconstrained parameters; `None` when the Hessian
    /// at the optimum is not negative definite.
    pub covariance: Option<[[f64; 5]; 5]>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_max: f64,
    pub quadrature_order: usize,
    pub k: usize,
    /// A standard deviation reached the `ln σ` floor.
    pub boundary: bool,
    pub starts: Vec<StartRecord>,
}

impl BglmmFit {
    pub fn covariance_matrix(&self) -> Option<Matrix5<f64>> {
        self.covariance.map(|c| Matrix5::from_fn(|i, j| c[i][j]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub order: usize,
    pub min_studies: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { order: DEFAULT_ORDER, min_studies: 5 }
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Moment-based starting values, one per entry of [`START_RHOS`].
fn starts(data: &[StudyData]) -> Vec<[f64; 5]> {
    let pooled = |arm: fn(&StudyData) -> Arm| {
        let (x, n) = data.iter().fold((0.0, 0.0), |acc, s| (acc.0 + arm(s).x, acc.1 + arm(s).n));
        logit(x / n)
    };
    let sd = |arm: fn(&StudyData) -> Arm| {
        let logits: Vec<f64> = data
            .iter()
            .map(|s| {
                let a = arm(s);
                ((a.x + 0.5) / (a.n - a.x + 0.5)).ln()
            })
            .collect();
        sample_sd(&logits).max(0.05)
    };
    let control = |s: &StudyData| s.control;
    let treatment = |s: &StudyData| s.treatment;
    let (m0, m1) = (pooled(control), pooled(treatment));
    let (s0, s1) = (sd(control), sd(treatment));
    START_RHOS.iter().map(|&r| [m0, m1, s0.ln(), s1.ln(), f64::atanh(r)]).collect()
}

/// Maximum-likelihood fit with multi-start BFGS.
pub fn fit(studies: &[StudyRow], opts: &FitOptions) -> Result<BglmmFit> {
    if opts.order < MIN_ORDER {
        return Err(BglmmError::InvalidOrder(opts.order));
    }
    let k = studies.len();
    if k < opts.min_studies {
        return Err(BglmmError::TooFewStudies { min: opts.min_studies, got: k });
    }
    if k < 10 {
        log::warn!("fitting the bivariate model to only {k} studies");
    }
    let data = prepare(studies)?;
    for (label, arm) in [("control", 0), ("treatment", 1)] {
        let (x, n) = data.iter().fold((0.0, 0.0), |acc, s| {
            let a = if arm == 0 { s.control } else { s.treatment };
            (acc.0 + a.x, acc.1 + a.n)
        });
        if x == 0.0 || x == n {
            return Err(BglmmError::DegenerateData(format!("{label} arm has no events or only events")));
        }
    }
    let rule = Rule::new(opts.order);
    let objective = |theta: &[f64]| match loglik_prepared(&BglmmParams::from_unconstrained(theta), &data, &rule) {
        Ok(v) => -v,
        Err(_) => f64::INFINITY,
    };
    let gradient = |theta: &[f64]| numeric_gradient(&objective, theta, GRADIENT_STEP);

    let mut records = Vec::new();
    let mut best: Option<(crate::optim::BfgsResult, usize)> = None;
    for (i, x0) in starts(&data).iter().enumerate() {
        let r = bfgs(objective, gradient, x0, BfgsOptions { max_iter: MAX_ITER, gtol: GRADIENT_TOL });
        records.push(StartRecord { rho: START_RHOS[i], loglik: -r.value, iterations: r.iterations, converged: r.converged });
        let better = match &best {
            None => true,
            Some((b, _)) => (r.converged && !b.converged) || (r.converged == b.converged && r.value < b.value),
        };
        if better {
            best = Some((r, i));
        }
    }
    let (best, _) = best.expect("at least one start");
    if !best.converged {
        return Err(BglmmError::NonConvergence);
    }

    let mut theta = best.x.clone();
    let boundary = theta[2] <= LOG_SIGMA_FLOOR || theta[3] <= LOG_SIGMA_FLOOR;
    for v in &mut theta[2..4] {
        *v = v.max(LOG_SIGMA_FLOOR);
    }
    theta[4] = theta[4].clamp(-ATANH_RHO_BOUND, ATANH_RHO_BOUND);
    let hess = numeric_hessian(&objective, &theta, HESSIAN_STEP);
    let covariance = if boundary {
        None
    } else {
        let h5 = SMatrix::<f64, 5, 5>::from_fn(|i, j| 0.5 * (hess[(i, j)] + hess[(j, i)]));
        h5.cholesky().map(|c| {
            let inv = c.inverse();
            let mut out = [[0.0; 5]; 5];
            for (i, row) in out.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = inv[(i, j)];
                }
            }
            out
        })
    };
    if covariance.is_none() {
        log::warn!("Hessian at the optimum is singular; parameter covariance unavailable");
    }

    let params = BglmmParams::from_unconstrained(&theta);
    Ok(BglmmFit {
        params,
        unconstrained: [theta[0], theta[1], theta[2], theta[3], theta[4]],
        covariance,
        loglik: -best.value,
        converged: best.converged,
        iterations: best.iterations,
        gradient_max: best.gradient.iter().fold(0.0, |m, g| m.max(g.abs())),
        quadrature_order: opts.order,
        k,
        boundary,
        starts: records,
    })
}

/// `E[expit(μ + σZ)]`.
pub fn marginal_risk(mu: f64, sigma: f64, gh: &GaussHermite) -> f64 {
    gh.normal_expectation(mu, sigma, expit)
}

/// Gradient of [`marginal_risk`] with respect to `(μ, ln σ)`.
pub fn marginal_risk_gradient(mu: f64, sigma: f64, gh: &GaussHermite) -> [f64; 2] {
    let mut d_mu = 0.0;
    let mut d_ls = 0.0;
    for (z, w) in gh.normal_nodes.iter().zip(&gh.normal_weights) {
        let p = expit(mu + sigma * z);
        let dp = p * (1.0 - p);
        d_mu += w * dp;
        d_ls += w * dp * sigma * z;
    }
    [d_mu, d_ls]
}

/// Derivative of the analysis-scale measure with respect to `(p1, p0)`.
fn measure_partials(kind: EffectKind, p1: f64, p0: f64) -> (f64, f64) {
    match kind {
        EffectKind::Or => (1.0 / (p1 * (1.0 - p1)), -1.0 / (p0 * (1.0 - p0))),
        EffectKind::Rr => (1.0 / p1, -1.0 / p0),
        EffectKind::Rd => (1.0, -1.0),
    }
}

/// Marginal treatment and control risks, `(p̄1, p̄0)`.
pub fn marginal_risks(p: &BglmmParams, gh: &GaussHermite) -> (f64, f64) {
    (marginal_risk(p.mu1, p.sigma1, gh), marginal_risk(p.mu0, p.sigma0, gh))
}

/// Gradient of the analysis-scale marginal measure with respect to the
/// unconstrained parameters.
pub fn marginal_gradient(p: &BglmmParams, kind: EffectKind, gh: &GaussHermite) -> [f64; 5] {
    let (p1, p0) = marginal_risks(p, gh);
    let (d1, d0) = measure_partials(kind, p1, p0);
    let g0 = marginal_risk_gradient(p.mu0, p.sigma0, gh);
    let g1 = marginal_risk_gradient(p.mu1, p.sigma1, gh);
    [d0 * g0[0], d1 * g1[0], d0 * g0[1], d1 * g1[1], 0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub kind: EffectKind,
    pub point: f64,
    pub risk_treatment: f64,
    pub risk_control: f64,
    /// Delta-method interval; absent when the covariance is unavailable.
    pub estimate: Option<EffectEstimate>,
}

/// Population-averaged effect from the marginal risks of each arm.
pub fn marginal(fit: &BglmmFit, kind: EffectKind, level: f64) -> Result<Marginal> {
    let gh = GaussHermite::new(RISK_ORDER);
    let (p1, p0) = marginal_risks(&fit.params, &gh);
    let point = kind.from_risks(p1, p0);
    let estimate = fit.covariance_matrix().map(|cov| {
        let g = Vector5::from(marginal_gradient(&fit.params, kind, &gh));
        let var = (g.transpose() * cov * g)[(0, 0)];
        EffectEstimate::from_transformed(kind, kind.to_transformed(point), var.max(0.0).sqrt(), level)
    });
    Ok(Marginal { kind, point, risk_treatment: p1, risk_control: p0, estimate })
}

/// Expected treatment risk among studies with baseline risk `p0`.
///
/// With `plug_in`, the conditional mean logit is pushed through `expit`
/// instead of averaging `expit` over the conditional distribution.
pub fn conditional_treatment_risk(p: &BglmmParams, p0: f64, plug_in: bool, gh: &GaussHermite) -> f64 {
    let nu0 = logit(p0) - p.mu0;
    let mean = p.mu1 + p.rho * (p.sigma1 / p.sigma0) * nu0;
    if plug_in {
        return expit(mean);
    }
    let sd = p.sigma1 * (1.0 - p.rho * p.rho).max(0.0).sqrt();
    gh.normal_expectation(mean, sd, expit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p0: f64,
    pub value: f64,
    pub compatibility: Option<(f64, f64)>,
    pub prediction: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalCurve {
    pub kind: EffectKind,
    pub level: f64,
    pub plug_in: bool,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveOptions {
    pub level: f64,
    pub draws: usize,
    pub seed: u64,
    pub plug_in: bool,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self { level: 0.95, draws: 4000, seed: 20210601, plug_in: false }
    }
}

/// Evenly spaced baseline risks strictly inside `(lo, hi)`.
pub fn baseline_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect()
}

/// Effect as a function of baseline risk, with pointwise compatibility and
/// prediction bands from parametric Monte Carlo draws.
pub fn conditional_curve(
    fit: &BglmmFit,
    kind: EffectKind,
    grid: &[f64],
    opts: &CurveOptions,
) -> Result<ConditionalCurve> {
    if grid.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(BglmmError::InvalidGrid);
    }
    let gh = GaussHermite::new(RISK_ORDER);
    let values: Vec<f64> = grid
        .iter()
        .map(|&p0| kind.from_risks(conditional_treatment_risk(&fit.params, p0, opts.plug_in, &gh), p0))
        .collect();

    let bands = fit.covariance_matrix().and_then(|cov| cov.cholesky()).map(|chol| {
        let l = chol.l();
        let theta = Vector5::from(fit.unconstrained);
        let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..opts.draws)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(b as u64);
                let eps = Vector5::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let resid: f64 = StandardNormal.sample(&mut rng);
                let t = theta + l * eps;
                let p = BglmmParams::from_unconstrained(t.as_slice());
                let sd = p.sigma1 * (1.0 - p.rho * p.rho).sqrt();
                let mut mean_curve = Vec::with_capacity(grid.len());
                let mut pred_curve = Vec::with_capacity(grid.len());
                for &p0 in grid {
                    let p1 = conditional_treatment_risk(&p, p0, opts.plug_in, &gh);
                    mean_curve.push(kind.from_risks(p1, p0));
                    let m = p.mu1 + p.rho * (p.sigma1 / p.sigma0) * (logit(p0) - p.mu0);
                    pred_curve.push(kind.from_risks(expit(m + sd * resid), p0));
                }
                (mean_curve, pred_curve)
            })
            .collect();
        let q = (1.0 - opts.level) / 2.0;
        (0..grid.len())
            .map(|g| {
                let mut m: Vec<f64> = draws.iter().map(|d| d.0[g]).filter(|v| v.is_finite()).collect();
                let mut p: Vec<f64> = draws.iter().map(|d| d.1[g]).filter(|v| v.is_finite()).collect();
                m.sort_by(f64::total_cmp);
                p.sort_by(f64::total_cmp);
                // The bands always cover the point, and the prediction band
                // always covers the compatibility band.
                let c = (
                    quantile_sorted(&m, q).min(values[g]),
                    quantile_sorted(&m, 1.0 - q).max(values[g]),
                );
                let pr = (quantile_sorted(&p, q).min(c.0), quantile_sorted(&p, 1.0 - q).max(c.1));
                (c, pr)
            })
            .collect::<Vec<_>>()
    });

    let points = grid
        .iter()
        .enumerate()
        .map(|(g, &p0)| CurvePoint {
            p0,
            value: values[g],
            compatibility: bands.as_ref().map(|b| b[g].0),
            prediction: bands.as_ref().map(|b| b[g].1),
        })
        .collect();
    Ok(ConditionalCurve { kind, level: opts.level, plug_in: opts.plug_in, points })
}

/// Draw studies from the model: per study a correlated random-effect pair,
/// then binomial counts in each arm of size `arm_size`.
pub fn simulate_studies(params: &BglmmParams, k: usize, arm_size: u64, seed: u64, meta_id: &str) -> Vec<StudyRow> {
    let r = (1.0 - params.rho * params.rho).sqrt();
    (0..k)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let nu0 = params.sigma0 * z1;
            let nu1 = params.sigma1 * (params.rho * z1 + r * z2);
            let c = Binomial::new(arm_size, expit(params.mu0 + nu0)).expect("valid probability").sample(&mut rng);
            let t = Binomial::new(arm_size, expit(params.mu1 + nu1)).expect("valid probability").sample(&mut rng);
            StudyRow {
                meta_id: meta_id.to_string(),
                study_id: format!("s{:04}", i + 1),
                t_events: t,
                t_total: arm_size,
                c_events: c,
                c_total: arm_size,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{effect, TwoByTwoTable};

    fn five_studies() -> Vec<StudyRow> {
        [(12, 50, 20, 50), (30, 120, 41, 118), (5, 40, 11, 42), (60, 200, 75, 210), (18, 75, 30, 80)]
            .iter()
            .enumerate()
            .map(|(i, &(te, tn, ce, cn))| StudyRow::new("m", format!("s{i}"), te, tn, ce, cn).unwrap())
            .collect()
    }

    fn binom_logpmf(x: u64, n: u64, p: f64) -> f64 {
        let (x, n) = (x as f64, n as f64);
        ln_gamma(n + 1.0) - ln_gamma(x + 1.0) - ln_gamma(n - x + 1.0) + x * p.ln() + (n - x) * (1.0 - p).ln()
    }

    #[test]
    fn unconstrained_round_trip() {
        let p = BglmmParams::new(-0.3, 0.4, 0.7, 1.3, -0.45).unwrap();
        let q = BglmmParams::from_unconstrained(&p.to_unconstrained());
        assert!((q.sigma0 - p.sigma0).abs() < 1e-14 && (q.rho - p.rho).abs() < 1e-14);
        assert!(BglmmParams::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(BglmmParams::new(0.0, 0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_random_effects() {
        let s = five_studies();
        let p = BglmmParams::new(-1.2, -0.8, 1e-8, 1e-8, 0.0).unwrap();
        let ll = loglik(&p, &s, DEFAULT_ORDER).unwrap();
        let direct: f64 = s
            .iter()
            .map(|r| binom_logpmf(r.c_events, r.c_total, expit(p.mu0)) + binom_logpmf(r.t_events, r.t_total, expit(p.mu1)))
            .sum();
        assert!((ll - direct).abs() < 1e-8, "{ll} vs {direct}");
    }

    #[test]
    fn quadrature_refinement() {
        let s = five_studies();
        for p in [
            BglmmParams::new(-1.2, -0.8, 0.6, 0.9, 0.4).unwrap(),
            BglmmParams::new(-0.5, -1.5, 1.5, 0.3, -0.8).unwrap(),
        ] {
            let a = loglik(&p, &s, 20).unwrap();
            let b = loglik(&p, &s, 80).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            let c = loglik(&p, &s, 40).unwrap();
            assert!((a - c).abs() < 1e-6);
        }
    }

    #[test]
    fn arm_swap_symmetry() {
        let s = vec![StudyRow::new("m", "s", 20, 40, 15, 30).unwrap()];
        let swapped = vec![StudyRow::new("m", "s", 15, 30, 20, 40).unwrap()];
        let p = BglmmParams::new(0.0, 0.0, 0.7, 1.2, 0.3).unwrap();
        let q = BglmmParams::new(0.0, 0.0, 1.2, 0.7, 0.3).unwrap();
        let a = loglik(&p, &s, 20).unwrap();
        let b = loglik(&q, &swapped, 20).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn order_and_size_checks() {
        let p = BglmmParams::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(loglik(&p, &five_studies(), 4), Err(BglmmError::InvalidOrder(4)));
        let few = &five_studies()[..4];
        assert!(matches!(fit(few, &FitOptions::default()), Err(BglmmError::TooFewStudies { .. })));
    }

    #[test]
    fn marginal_risk_symmetric_point() {
        let gh = GaussHermite::new(RISK_ORDER);
        assert!((marginal_risk(0.0, 1.0, &gh) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn marginal_risk_matches_dense_grid() {
        // Midpoint rule over ±12 sd with 10⁶ cells.
        let (mu, sigma) = (-1.0, 0.5);
        let n = 1_000_000;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / n as f64;
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        let oracle: f64 = (0..n)
            .map(|i| {
                let z = lo + (i as f64 + 0.5) * h;
                expit(mu + sigma * z) * (-0.5 * z * z).exp() / norm * h
            })
            .sum();
        let gh = GaussHermite::new(RISK_ORDER);
        assert!((marginal_risk(mu, sigma, &gh) - oracle).abs() < 1e-8);
    }

    #[test]
    fn marginal_gradient_matches_finite_differences() {
        let gh = GaussHermite::new(RISK_ORDER);
        let p = BglmmParams::new(-0.7, -1.6, 0.9, 0.5, 0.3).unwrap();
        for kind in EffectKind::ALL {
            let analytic = marginal_gradient(&p, kind, &gh);
            let f = |t: &[f64]| {
                let q = BglmmParams::from_unconstrained(t);
                let (p1, p0) = marginal_risks(&q, &gh);
                kind.to_transformed(kind.from_risks(p1, p0))
            };
            let numeric = numeric_gradient(&f, &p.to_unconstrained(), 1e-6);
            for j in 0..5 {
                assert!((analytic[j] - numeric[j]).abs() < 1e-4, "{kind} {j}: {} vs {}", analytic[j], numeric[j]);
            }
        }
    }

    fn fake_fit(params: BglmmParams, cov_scale: Option<f64>) -> BglmmFit {
        BglmmFit {
            params,
            unconstrained: params.to_unconstrained(),
            covariance: cov_scale.map(|s| {
                let mut c = [[0.0; 5]; 5];
                for (i, row) in c.iter_mut().enumerate() {
                    row[i] = s;
                }
                c
            }),
            loglik: 0.0,
            converged: true,
            iterations: 0,
            gradient_max: 0.0,
            quadrature_order: DEFAULT_ORDER,
            k: 10,
            boundary: false,
            starts: vec![],
        }
    }

    #[test]
    fn degenerate_marginal() {
        let f = fake_fit(BglmmParams::new(-1.0, -0.2, 1e-7, 1e-7, 0.0).unwrap(), None);
        let m = marginal(&f, EffectKind::Or, 0.95).unwrap();
        assert!((m.point - 0.8f64.exp()).abs() < 1e-9);
        assert!(m.estimate.is_none());
    }

    #[test]
    fn marginal_agrees_with_tabular_formulas() {
        let f = fake_fit(BglmmParams::new(-1.0, -1.9, 0.8, 0.6, 0.5).unwrap(), Some(0.01));
        for kind in EffectKind::ALL {
            let m = marginal(&f, kind, 0.95).unwrap();
            let t = TwoByTwoTable::new(m.risk_treatment, 1.0 - m.risk_treatment, m.risk_control, 1.0 - m.risk_control)
                .unwrap();
            let tab = effect(&t, kind, 0.95).unwrap().point;
            assert!((m.point - tab).abs() < 1e-12);
            let e = m.estimate.unwrap();
            assert!(e.ci_low < e.point && e.point < e.ci_high);
        }
    }

    #[test]
    fn perfectly_correlated_equal_scales_give_constant_or() {
        let p = BglmmParams { mu0: -1.0, mu1: -2.0, sigma0: 0.8, sigma1: 0.8, rho: 1.0 - 1e-12 };
        let f = fake_fit(p, None);
        let c = conditional_curve(&f, EffectKind::Or, &baseline_grid(0.05, 0.95, 19), &CurveOptions::default()).unwrap();
        for pt in &c.points {
            assert!((pt.value - (-1.0f64).exp()).abs() < 1e-6, "{}", pt.value);
            assert!(pt.compatibility.is_none());
        }
    }

    #[test]
    fn or_curve_decreasing_when_rho_below_scale_ratio() {
        let p = BglmmParams::new(-0.5, -1.5, 0.8, 0.6, 0.5).unwrap();
        let f = fake_fit(p, None);
        let grid = baseline_grid(0.01, 0.99, 400);
        for plug_in in [false, true] {
            let c = conditional_curve(&f, EffectKind::Or, &grid, &CurveOptions { plug_in, ..Default::default() }).unwrap();
            for w in c.points.windows(2) {
                assert!(w[1].value < w[0].value);
            }
        }
    }

    #[test]
    fn bands_nest_and_cover() {
        let f = fake_fit(BglmmParams::new(-0.5, -1.5, 0.8, 0.6, 0.5).unwrap(), Some(0.004));
        let grid = baseline_grid(0.1, 0.9, 9);
        for kind in EffectKind::ALL {
            let wide = conditional_curve(&f, kind, &grid, &CurveOptions { draws: 1000, ..Default::default() }).unwrap();
            let narrow =
                conditional_curve(&f, kind, &grid, &CurveOptions { draws: 1000, level: 0.5, ..Default::default() })
                    .unwrap();
            for (w, n) in wide.points.iter().zip(&narrow.points) {
                let (wc, wp) = (w.compatibility.unwrap(), w.prediction.unwrap());
                let (nc, np) = (n.compatibility.unwrap(), n.prediction.unwrap());
                assert!(wc.0 <= w.value && w.value <= wc.1);
                assert!(wp.0 <= wc.0 && wc.1 <= wp.1);
                assert!(wc.0 <= nc.0 && nc.1 <= wc.1);
                assert!(wp.0 <= np.0 && np.1 <= wp.1);
            }
        }
    }

    #[test]
    fn grid_outside_unit_interval_rejected() {
        let f = fake_fit(BglmmParams::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap(), None);
        assert_eq!(conditional_curve(&f, EffectKind::Rr, &[0.0, 0.5], &CurveOptions::default()), Err(BglmmError::InvalidGrid));
    }

    #[test]
    fn identical_studies_hit_the_boundary() {
        let s: Vec<StudyRow> = (0..20).map(|i| StudyRow::new("m", format!("s{i}"), 300, 1000, 200, 1000).unwrap()).collect();
        let f = fit(&s, &FitOptions::default()).unwrap();
        assert!(f.params.sigma0 < 0.05 && f.params.sigma1 < 0.05, "{:?}", f.params);
        assert!((f.params.mu0 - logit(0.2)).abs() < 1e-3);
        assert!((f.params.mu1 - logit(0.3)).abs() < 1e-3);
    }

    #[test]
    fn fit_is_permutation_invariant_and_locally_optimal() {
        let p = BglmmParams::new(-1.0, -1.6, 0.7, 0.5, 0.4).unwrap();
        let s = simulate_studies(&p, 25, 150, 11, "m");
        let f = fit(&s, &FitOptions::default()).unwrap();
        let mut rev = s.clone();
        rev.reverse();
        rev.rotate_left(7);
        let g = fit(&rev, &FitOptions::default()).unwrap();
        assert_eq!(f, g);

        assert!(f.converged && f.gradient_max < GRADIENT_TOL);
        let data = prepare(&s).unwrap();
        let rule = Rule::new(f.quadrature_order);
        for j in 0..5 {
            for d in [-1e-3, 1e-3] {
                let mut t = f.unconstrained;
                t[j] += d;
                let ll = loglik_prepared(&BglmmParams::from_unconstrained(&t), &data, &rule).unwrap();
                assert!(ll < f.loglik, "coordinate {j} step {d}");
            }
        }
        let cov = f.covariance_matrix().unwrap();
        assert!((cov - cov.transpose()).amax() < 1e-12);
        assert!(cov.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
    }
}

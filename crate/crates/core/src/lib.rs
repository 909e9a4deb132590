//! Effect-measure toolchain for binary outcomes.
//!
//! - [`tabular`]: OR, RR and RD from 2×2 tables, zero-cell correction,
//!   OR↔RR conversion at a baseline risk and crude-vs-stratified comparisons.
//! - [`glm`]: binomial GLMs (logit and log links) fitted by IRLS, likelihood
//!   ratio tests and marginal standardization.
//! - [`meta`]: two-stage random-effects meta-analysis (FE, DerSimonian–Laird, REML).
//! - [`bglmm`]: the bivariate binomial-normal random-effects model and the
//!   effect curves it implies as a function of baseline risk.
//! - [`rankcorr`]: Spearman correlation of effects with baseline risk.
//! - [`corpus`]: screening many meta-analyses and simulating corpora.

pub mod bglmm;
pub mod corpus;
pub mod glm;
pub mod io;
pub mod meta;
pub mod optim;
pub mod plot;
pub mod quadrature;
pub mod rankcorr;
pub mod repro;
pub mod stats;
pub mod tabular;

pub use tabular::{EffectEstimate, EffectKind, TwoByTwoTable};

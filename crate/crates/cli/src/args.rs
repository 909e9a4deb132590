use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "effport", version, about = "Effect measures, GLMs, meta-analysis and baseline-risk portability")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-study OR, RR and RD with Wald intervals.
    Measures(MeasuresArgs),
    /// Binomial GLM on grouped data.
    Glm(GlmArgs),
    /// Two-stage random-effects meta-analysis per meta_id.
    Meta(MetaArgs),
    /// Bivariate random-effects model: fit, marginal effects and
    /// baseline-risk conditional curves.
    Bglmm(BglmmArgs),
    /// Spearman correlation of each measure with baseline risk.
    Corr(CorrArgs),
    /// Corpus screening and synthetic corpora.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Rebuild the reference tables from embedded data and diff them.
    Repro(ReproArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Correlate measures with baseline risk across many meta-analyses.
    Analyze(AnalyzeArgs),
    /// Generate meta-analyses under a constant-effect mechanism.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureArg {
    Or,
    Rr,
    Rd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Fe,
    Dl,
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkArg {
    Logit,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismArg {
    ConstantOr,
    ConstantRr,
    ConstantRd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TableArg {
    Table1,
    Table2,
}

/// Options shared by every command that writes a result.
#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Output file; standard output when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StudyInput {
    /// CSV with columns meta_id,study_id,t_events,t_total,c_events,c_total.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Restrict to one meta-analysis.
    #[arg(long)]
    pub meta_id: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MeasuresArgs {
    #[command(flatten)]
    pub study: StudyInput,
    /// Measures to report; all three when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub measure: Vec<MeasureArg>,
    /// Added to every cell of tables with a zero cell; 0 disables.
    #[arg(long, default_value_t = 0.5)]
    pub correction: f64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlmArgs {
    /// CSV with columns pattern_id,<covariates...>,events,trials.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Comma-separated terms, e.g. "X,Z,X:Z".
    #[arg(long)]
    pub terms: String,
    #[arg(long, value_enum, default_value = "logit")]
    pub link: LinkArg,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Also report marginal OR/RR/RD for this exposure by standardization.
    #[arg(long)]
    pub standardize: Option<String>,
    #[arg(long, default_value_t = 2000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 20210601)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MetaArgs {
    #[command(flatten)]
    pub study: StudyInput,
    #[arg(long, value_enum, default_value = "or")]
    pub measure: MeasureArg,
    #[arg(long, value_enum, default_value = "reml")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 0.5)]
    pub correction: f64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Forest plot (SVG); needs a single meta-analysis.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BglmmArgs {
    #[command(flatten)]
    pub study: StudyInput,
    /// Gauss–Hermite nodes per dimension.
    #[arg(long, default_value_t = 20)]
    pub quadrature: usize,
    #[arg(long, default_value_t = 5)]
    pub min_studies: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Seed for the Monte Carlo bands.
    #[arg(long, default_value_t = 20210601)]
    pub seed: u64,
    #[arg(long, default_value_t = 4000)]
    pub draws: usize,
    /// Baseline risks evaluated on the curve.
    #[arg(long, default_value_t = 99)]
    pub grid_points: usize,
    /// Use expit of the conditional mean logit instead of the conditional
    /// mean risk.
    #[arg(long)]
    pub plug_in: bool,
    /// Correction used for the observed study points in the plot.
    #[arg(long, default_value_t = 0.5)]
    pub correction: f64,
    /// Three-panel curve figure (SVG); needs a single meta-analysis.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CorrArgs {
    #[command(flatten)]
    pub study: StudyInput,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub measure: Vec<MeasureArg>,
    #[arg(long, default_value_t = 0.5)]
    pub correction: f64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub min_studies: usize,
    /// |rho| below this counts as negligible.
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    /// Study count separating the two strata.
    #[arg(long, default_value_t = 20)]
    pub split_at: usize,
    #[arg(long, default_value_t = 0.5)]
    pub correction: f64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Summary JSON, written alongside a CSV records output.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Scatter plot (SVG).
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub mechanism: MechanismArg,
    /// Constant OR, RR or RD; defaults to 0.7 for ratios and -0.1 for RD.
    #[arg(long, allow_hyphen_values = true)]
    pub effect: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub n_meta: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub baseline_min: f64,
    #[arg(long, default_value_t = 0.9)]
    pub baseline_max: f64,
    #[arg(long, default_value_t = 5)]
    pub studies_min: usize,
    #[arg(long, default_value_t = 40)]
    pub studies_max: usize,
    #[arg(long, default_value_t = 50)]
    pub arm_min: u64,
    #[arg(long, default_value_t = 500)]
    pub arm_max: u64,
    /// Output file; standard output when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReproArgs {
    #[arg(value_enum)]
    pub table: TableArg,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

use std::fs::File;
use std::path::Path;

use effport::bglmm::{self, CurveOptions, FitOptions};
use effport::corpus::{self, AnalyzeOptions, Mechanism, SimMechanism};
use effport::glm::{self, Link, ModelSpec, StandardizeOptions};
use effport::io;
use effport::meta::{self, Method, StudyRow};
use effport::plot::{self, ObservedStudy};
use effport::rankcorr::{self, RankCorrError};
use effport::repro;
use effport::tabular::{self, EffectKind};
use serde::Serialize;

use crate::args::*;
use crate::error::{CliError, Result};
use crate::output::{csv_bytes, emit, emit_csv, envelope, write_atomic};

fn kind(m: MeasureArg) -> EffectKind {
    match m {
        MeasureArg::Or => EffectKind::Or,
        MeasureArg::Rr => EffectKind::Rr,
        MeasureArg::Rd => EffectKind::Rd,
    }
}

fn kinds(ms: &[MeasureArg]) -> Vec<EffectKind> {
    if ms.is_empty() {
        EffectKind::ALL.to_vec()
    } else {
        let mut out: Vec<EffectKind> = Vec::new();
        for &m in ms {
            if !out.contains(&kind(m)) {
                out.push(kind(m));
            }
        }
        out
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("--level must lie in (0, 1), got {level}")))
    }
}

fn check_correction(c: f64) -> Result<()> {
    if c >= 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(CliError::usage(format!("--correction must be a non-negative number, got {c}")))
    }
}

fn open(path: &Path) -> Result<File> {
    if !path.is_file() {
        return Err(CliError::usage(format!("input file '{}' does not exist", path.display())));
    }
    Ok(File::open(path)?)
}

fn check_output_dir(paths: &[Option<&Path>]) -> Result<()> {
    for p in paths.iter().flatten() {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !dir.is_dir() {
                return Err(CliError::usage(format!("output directory '{}' does not exist", dir.display())));
            }
        }
    }
    Ok(())
}

/// Study rows grouped by meta-analysis, in `meta_id` order.
fn load_groups(input: &StudyInput) -> Result<Vec<(String, Vec<StudyRow>)>> {
    let rows = io::read_studies(open(&input.input)?)?;
    let groups: Vec<(String, Vec<StudyRow>)> = corpus::group_by_meta(&rows)
        .into_iter()
        .filter(|(id, _)| input.meta_id.as_deref().is_none_or(|m| m == *id))
        .map(|(id, v)| (id.to_string(), v.into_iter().cloned().collect()))
        .collect();
    if groups.is_empty() {
        return Err(CliError::data(match &input.meta_id {
            Some(m) => format!("no studies with meta_id '{m}'"),
            None => "no studies".to_string(),
        }));
    }
    Ok(groups)
}

fn single<'a>(groups: &'a [(String, Vec<StudyRow>)], what: &str) -> Result<&'a (String, Vec<StudyRow>)> {
    match groups {
        [one] => Ok(one),
        _ => Err(CliError::usage(format!(
            "{what} needs a single meta-analysis; the input has {}, select one with --meta-id",
            groups.len()
        ))),
    }
}

#[derive(Serialize)]
struct MeasureRow {
    meta_id: String,
    study_id: String,
    measure: EffectKind,
    point: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
    level: f64,
    corrected: bool,
}

pub fn measures(a: &MeasuresArgs) -> Result<()> {
    check_level(a.level)?;
    check_correction(a.correction)?;
    check_output_dir(&[a.out.output.as_deref()])?;
    let groups = load_groups(&a.study)?;
    let mut rows = Vec::new();
    for (_, studies) in &groups {
        for s in studies {
            let raw = s.table();
            let t = s.analysis_table(a.correction);
            for k in kinds(&a.measure) {
                let e = tabular::effect(&t, k, a.level)
                    .map_err(|e| CliError::data(format!("study '{}': {e}", s.study_id)))?;
                rows.push(MeasureRow {
                    meta_id: s.meta_id.clone(),
                    study_id: s.study_id.clone(),
                    measure: k,
                    point: e.point,
                    se: e.se,
                    ci_low: e.ci_low,
                    ci_high: e.ci_high,
                    level: e.level,
                    corrected: t != raw,
                });
            }
        }
    }
    match a.out.format {
        Format::Json => emit(a.out.output.as_deref(), &envelope("measures", a, &rows)?),
        Format::Csv => emit_csv(a.out.output.as_deref(), "measures", a, &csv_bytes(&rows)?),
    }
}

#[derive(Serialize)]
struct GlmResult {
    names: Vec<String>,
    coefficients: Vec<glm::CoefficientSummary>,
    deviance: f64,
    loglik: f64,
    iterations: usize,
    converged: bool,
    standardized: Option<glm::Standardized>,
}

pub fn glm_cmd(a: &GlmArgs) -> Result<()> {
    check_level(a.level)?;
    check_output_dir(&[a.out.output.as_deref()])?;
    let link = match a.link {
        LinkArg::Logit => Link::Logit,
        LinkArg::Log => Link::Log,
    };
    let spec = ModelSpec::parse(link, &a.terms)?;
    let data = io::read_glm_data(open(&a.input)?)?;
    let fit = glm::fit(&data, &spec)?;
    let standardized = match &a.standardize {
        Some(x) => Some(glm::standardize(
            &fit,
            &data,
            x,
            &StandardizeOptions { resamples: a.resamples, seed: a.seed, level: a.level },
        )?),
        None => None,
    };
    let coefficients = fit.summary(a.level);
    match a.out.format {
        Format::Json => {
            let r = GlmResult {
                names: fit.names.clone(),
                coefficients,
                deviance: fit.deviance,
                loglik: fit.loglik,
                iterations: fit.iterations,
                converged: fit.converged,
                standardized,
            };
            emit(a.out.output.as_deref(), &envelope("glm", a, r)?)
        }
        Format::Csv => emit_csv(a.out.output.as_deref(), "glm", a, &csv_bytes(&coefficients)?),
    }
}

#[derive(Serialize)]
struct MetaRow {
    meta_id: String,
    measure: EffectKind,
    method: Method,
    k: usize,
    tau2: f64,
    q: f64,
    point: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
    level: f64,
}

pub fn meta_cmd(a: &MetaArgs) -> Result<()> {
    check_level(a.level)?;
    check_correction(a.correction)?;
    check_output_dir(&[a.out.output.as_deref(), a.plot.as_deref()])?;
    let groups = load_groups(&a.study)?;
    let method = match a.method {
        MethodArg::Fe => Method::Fe,
        MethodArg::Dl => Method::Dl,
        MethodArg::Reml => Method::Reml,
    };
    if a.plot.is_some() {
        single(&groups, "--plot")?;
    }
    let mut fits = Vec::new();
    for (id, studies) in &groups {
        let f = meta::two_stage(studies, kind(a.measure), method, a.correction, a.level)
            .map_err(|e| CliError::from(e).context(id))?;
        fits.push((id.clone(), f));
    }
    if let Some(p) = &a.plot {
        let (id, f) = &fits[0];
        write_atomic(p, plot::forest_plot(f, &format!("{id}: {} ({})", f.kind, f.method)).as_bytes())?;
    }
    match a.out.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Item<'a> {
                meta_id: &'a str,
                fit: &'a meta::ReMetaFit,
            }
            let items: Vec<Item> = fits.iter().map(|(id, fit)| Item { meta_id: id, fit }).collect();
            emit(a.out.output.as_deref(), &envelope("meta", a, items)?)
        }
        Format::Csv => {
            let rows: Vec<MetaRow> = fits
                .iter()
                .map(|(id, f)| MetaRow {
                    meta_id: id.clone(),
                    measure: f.kind,
                    method: f.method,
                    k: f.k,
                    tau2: f.tau2,
                    q: f.q,
                    point: f.pooled.point,
                    se: f.pooled.se,
                    ci_low: f.pooled.ci_low,
                    ci_high: f.pooled.ci_high,
                    level: f.pooled.level,
                })
                .collect();
            emit_csv(a.out.output.as_deref(), "meta", a, &csv_bytes(&rows)?)
        }
    }
}

impl CliError {
    fn context(mut self, meta_id: &str) -> Self {
        self.message = format!("meta-analysis '{meta_id}': {}", self.message);
        self
    }
}

#[derive(Serialize)]
struct BglmmResult {
    meta_id: String,
    fit: bglmm::BglmmFit,
    marginals: Vec<bglmm::Marginal>,
    curves: Vec<bglmm::ConditionalCurve>,
}

#[derive(Serialize)]
struct CurveRow {
    meta_id: String,
    measure: EffectKind,
    p0: f64,
    value: f64,
    compat_low: Option<f64>,
    compat_high: Option<f64>,
    pred_low: Option<f64>,
    pred_high: Option<f64>,
}

fn observed(studies: &[StudyRow], correction: f64) -> Result<Vec<ObservedStudy>> {
    let mut per = Vec::new();
    for k in EffectKind::ALL {
        per.push(rankcorr::baseline_and_effects(studies, k, correction)?);
    }
    Ok((0..studies.len())
        .map(|i| ObservedStudy { p0: per[0].0[i], or: per[0].1[i], rr: per[1].1[i], rd: per[2].1[i] })
        .collect())
}

pub fn bglmm_cmd(a: &BglmmArgs) -> Result<()> {
    check_level(a.level)?;
    check_correction(a.correction)?;
    check_output_dir(&[a.out.output.as_deref(), a.plot.as_deref()])?;
    if a.grid_points < 2 {
        return Err(CliError::usage("--grid-points must be at least 2"));
    }
    if a.draws < 10 {
        return Err(CliError::usage("--draws must be at least 10"));
    }
    let groups = load_groups(&a.study)?;
    if a.plot.is_some() {
        single(&groups, "--plot")?;
    }
    let grid = bglmm::baseline_grid(0.01, 0.99, a.grid_points);
    let opts = CurveOptions { level: a.level, draws: a.draws, seed: a.seed, plug_in: a.plug_in };
    let mut results = Vec::new();
    for (id, studies) in &groups {
        let fit = bglmm::fit(studies, &FitOptions { order: a.quadrature, min_studies: a.min_studies })
            .map_err(|e| CliError::from(e).context(id))?;
        let mut marginals = Vec::new();
        let mut curves = Vec::new();
        for k in EffectKind::ALL {
            marginals.push(bglmm::marginal(&fit, k, a.level)?);
            curves.push(bglmm::conditional_curve(&fit, k, &grid, &opts)?);
        }
        results.push(BglmmResult { meta_id: id.clone(), fit, marginals, curves });
    }
    if let Some(p) = &a.plot {
        let obs = observed(&groups[0].1, a.correction)?;
        write_atomic(p, plot::curve_figure(&results[0].curves, &obs).as_bytes())?;
    }
    match a.out.format {
        Format::Json => emit(a.out.output.as_deref(), &envelope("bglmm", a, &results)?),
        Format::Csv => {
            let rows: Vec<CurveRow> = results
                .iter()
                .flat_map(|r| {
                    r.curves.iter().flat_map(move |c| {
                        c.points.iter().map(move |p| CurveRow {
                            meta_id: r.meta_id.clone(),
                            measure: c.kind,
                            p0: p.p0,
                            value: p.value,
                            compat_low: p.compatibility.map(|b| b.0),
                            compat_high: p.compatibility.map(|b| b.1),
                            pred_low: p.prediction.map(|b| b.0),
                            pred_high: p.prediction.map(|b| b.1),
                        })
                    })
                })
                .collect();
            emit_csv(a.out.output.as_deref(), "bglmm", a, &csv_bytes(&rows)?)
        }
    }
}

#[derive(Serialize)]
struct CorrRow {
    meta_id: String,
    measure: EffectKind,
    k: usize,
    rho: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    level: f64,
    status: &'static str,
}

pub fn corr(a: &CorrArgs) -> Result<()> {
    check_level(a.level)?;
    check_correction(a.correction)?;
    check_output_dir(&[a.out.output.as_deref()])?;
    let groups = load_groups(&a.study)?;
    let mut rows = Vec::new();
    for (id, studies) in &groups {
        for k in kinds(&a.measure) {
            let (rho, status) = match rankcorr::correlate_meta(studies, k, a.correction, a.level) {
                Ok(r) => (Some(r), "ok"),
                Err(RankCorrError::Degenerate) => (None, "degenerate"),
                Err(e) => return Err(CliError::from(e).context(id)),
            };
            rows.push(CorrRow {
                meta_id: id.clone(),
                measure: k,
                k: studies.len(),
                rho: rho.map(|r| r.rho),
                ci_low: rho.map(|r| r.ci_low),
                ci_high: rho.map(|r| r.ci_high),
                level: a.level,
                status,
            });
        }
    }
    match a.out.format {
        Format::Json => emit(a.out.output.as_deref(), &envelope("corr", a, &rows)?),
        Format::Csv => emit_csv(a.out.output.as_deref(), "corr", a, &csv_bytes(&rows)?),
    }
}

pub fn corpus_analyze(a: &AnalyzeArgs) -> Result<()> {
    check_level(a.level)?;
    check_correction(a.correction)?;
    check_output_dir(&[a.out.output.as_deref(), a.summary.as_deref(), a.plot.as_deref()])?;
    let rows = io::read_studies(open(&a.input)?)?;
    let opts = AnalyzeOptions {
        min_studies: a.min_studies,
        threshold: a.threshold,
        split_at: a.split_at,
        correction: a.correction,
        level: a.level,
    };
    let analysis = corpus::analyze(&rows, &opts)?;
    if let Some(p) = &a.plot {
        write_atomic(p, plot::corpus_scatter(&analysis).as_bytes())?;
    }
    if let Some(p) = &a.summary {
        #[derive(Serialize)]
        struct Summary<'a> {
            summaries: &'a [corpus::CorpusSummary],
            skipped: &'a [corpus::SkippedMeta],
        }
        write_atomic(
            p,
            &envelope("corpus analyze", a, Summary { summaries: &analysis.summaries, skipped: &analysis.skipped })?,
        )?;
    }
    match a.out.format {
        Format::Json => emit(a.out.output.as_deref(), &envelope("corpus analyze", a, &analysis)?),
        Format::Csv => {
            let mut buf = Vec::new();
            io::write_records(&mut buf, &analysis.records, a.level)?;
            emit_csv(a.out.output.as_deref(), "corpus analyze", a, &buf)
        }
    }
}

pub fn corpus_simulate(a: &SimulateArgs) -> Result<()> {
    check_output_dir(&[a.output.as_deref()])?;
    let mechanism = match a.mechanism {
        MechanismArg::ConstantOr => Mechanism::ConstantOr,
        MechanismArg::ConstantRr => Mechanism::ConstantRr,
        MechanismArg::ConstantRd => Mechanism::ConstantRd,
    };
    let effect = a.effect.unwrap_or(match mechanism {
        Mechanism::ConstantRd => -0.1,
        _ => 0.7,
    });
    let mech = SimMechanism::with_ranges(
        mechanism,
        effect,
        (a.baseline_min, a.baseline_max),
        (a.studies_min, a.studies_max),
        (a.arm_min, a.arm_max),
        a.seed,
    )?;
    let rows = corpus::simulate(&mech, a.n_meta)?;
    let mut buf = Vec::new();
    io::write_studies(&mut buf, &rows)?;
    emit_csv(a.output.as_deref(), "corpus simulate", a, &buf)
}

/// Returns whether every value matched.
pub fn repro_cmd(a: &ReproArgs) -> Result<bool> {
    check_output_dir(&[a.output.as_deref()])?;
    let report = match a.table {
        TableArg::Table1 => repro::table1()?,
        TableArg::Table2 => repro::table2()?,
    };
    let bytes = match a.format {
        Format::Json => envelope("repro", a, &report)?,
        Format::Csv => report.to_string().into_bytes(),
    };
    emit(a.output.as_deref(), &bytes)?;
    Ok(report.all_pass())
}

//! CSV formats: study rows, grouped GLM data and corpus records.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusRecord;
use crate::glm::{Dataset, GlmError, Pattern};
use crate::meta::{MetaError, StudyRow};
use crate::rankcorr::SpearmanResult;
use crate::tabular::EffectKind;

pub const STUDY_HEADER: [&str; 6] = ["meta_id", "study_id", "t_events", "t_total", "c_events", "c_total"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("no studies in input")]
    NoStudies,
    #[error("no rows in input")]
    NoRows,
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error(transparent)]
    Study(#[from] MetaError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn parse_error(e: csv::Error) -> IoError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => IoError::Csv(e),
        _ => IoError::Parse { line, message: e.to_string() },
    }
}

/// Reads `meta_id,study_id,t_events,t_total,c_events,c_total` rows and
/// validates each one.
pub fn read_studies<R: Read>(reader: R) -> Result<Vec<StudyRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<StudyRow>() {
        let row = rec.map_err(parse_error)?;
        row.validate()?;
        out.push(row);
    }
    if out.is_empty() {
        return Err(IoError::NoStudies);
    }
    Ok(out)
}

pub fn write_studies<W: Write>(writer: W, rows: &[StudyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(STUDY_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads grouped binomial data `pattern_id,<covariates...>,events,trials`.
pub fn read_glm_data<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(parse_error)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| IoError::MissingColumn(name.into()));
    let (events, trials) = (col("events")?, col("trials")?);
    let id = headers.iter().position(|h| h == "pattern_id");
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|&j| j != events && j != trials && Some(j) != id).collect();
    let covariates: Vec<String> = cov_cols.iter().map(|&j| headers[j].to_string()).collect();
    let mut patterns = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(parse_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |j: usize| {
            rec[j].parse::<f64>().map_err(|_| IoError::Parse {
                line,
                message: format!("column '{}': '{}' is not a number", &headers[j], &rec[j]),
            })
        };
        patterns.push(Pattern {
            values: cov_cols.iter().map(|&j| num(j)).collect::<Result<Vec<_>>>()?,
            events: num(events)?,
            trials: num(trials)?,
        });
    }
    if patterns.is_empty() {
        return Err(IoError::NoRows);
    }
    Ok(Dataset::from_patterns(covariates, patterns)?)
}

/// Flat CSV form of a [`CorpusRecord`]; empty cells mark an undefined
/// correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordRow {
    meta_id: String,
    k: usize,
    level: f64,
    rho_or: Option<f64>,
    rho_or_low: Option<f64>,
    rho_or_high: Option<f64>,
    rho_rr: Option<f64>,
    rho_rr_low: Option<f64>,
    rho_rr_high: Option<f64>,
    rho_rd: Option<f64>,
    rho_rd_low: Option<f64>,
    rho_rd_high: Option<f64>,
}

type Triple = (Option<f64>, Option<f64>, Option<f64>);

fn split(r: Option<SpearmanResult>) -> Triple {
    match r {
        Some(s) => (Some(s.rho), Some(s.ci_low), Some(s.ci_high)),
        None => (None, None, None),
    }
}

fn join(kind: EffectKind, n: usize, level: f64, t: Triple, line: u64) -> Result<Option<SpearmanResult>> {
    match t {
        (Some(rho), Some(ci_low), Some(ci_high)) => Ok(Some(SpearmanResult { kind, rho, n, ci_low, ci_high, level })),
        (None, None, None) => Ok(None),
        _ => Err(IoError::Parse { line, message: format!("incomplete {kind} correlation") }),
    }
}

pub fn write_records<W: Write>(writer: W, records: &[CorpusRecord], level: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        let (rho_or, rho_or_low, rho_or_high) = split(r.rho_or);
        let (rho_rr, rho_rr_low, rho_rr_high) = split(r.rho_rr);
        let (rho_rd, rho_rd_low, rho_rd_high) = split(r.rho_rd);
        let level = [r.rho_or, r.rho_rr, r.rho_rd].iter().flatten().map(|s| s.level).next().unwrap_or(level);
        w.serialize(RecordRow {
            meta_id: r.meta_id.clone(),
            k: r.k,
            level,
            rho_or,
            rho_or_low,
            rho_or_high,
            rho_rr,
            rho_rr_low,
            rho_rr_high,
            rho_rd,
            rho_rd_low,
            rho_rd_high,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(reader: R) -> Result<Vec<CorpusRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<RecordRow>() {
        let line = out.len() as u64 + 2;
        let r = rec.map_err(parse_error)?;
        out.push(CorpusRecord {
            meta_id: r.meta_id,
            k: r.k,
            rho_or: join(EffectKind::Or, r.k, r.level, (r.rho_or, r.rho_or_low, r.rho_or_high), line)?,
            rho_rr: join(EffectKind::Rr, r.k, r.level, (r.rho_rr, r.rho_rr_low, r.rho_rr_high), line)?,
            rho_rd: join(EffectKind::Rd, r.k, r.level, (r.rho_rd, r.rho_rd_low, r.rho_rd_high), line)?,
        });
    }
    Ok(out)
}

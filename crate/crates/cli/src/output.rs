use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::NamedTempFile;

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

/// JSON wrapper carrying the result with the configuration that produced it.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, C: Serialize, R: Serialize> {
    pub schema_version: u32,
    pub tool: Tool,
    pub command: &'a str,
    pub config: &'a C,
    pub result: R,
}

#[derive(Debug, Serialize)]
pub struct Tool {
    pub name: &'static str,
    pub version: &'static str,
}

pub const TOOL: Tool = Tool { name: "effport", version: env!("CARGO_PKG_VERSION") };

pub fn envelope<C: Serialize, R: Serialize>(command: &str, config: &C, result: R) -> Result<Vec<u8>> {
    let env = Envelope { schema_version: SCHEMA_VERSION, tool: TOOL, command, config, result };
    let mut bytes = serde_json::to_vec_pretty(&env)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Replaces `path` with `bytes` through a temporary file in the same
/// directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writes to `path`, or to standard output when absent.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

/// Metadata file written next to CSV outputs, which cannot carry it inline.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn emit_csv<C: Serialize>(path: Option<&Path>, command: &str, config: &C, bytes: &[u8]) -> Result<()> {
    emit(path, bytes)?;
    if let Some(p) = path {
        write_atomic(&sidecar_path(p), &envelope(command, config, serde_json::Value::Null)?)?;
    }
    Ok(())
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| crate::error::CliError::data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| crate::error::CliError::data(e.to_string()))
}

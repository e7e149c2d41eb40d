//! File formats. JSON documents are wrapped in an envelope, JSON-lines files
//! start with a header line, and CSV files start with a `#` comment line; all
//! three carry the schema, the tool version and the effective [`RunConfig`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use glucoloop::fit::FitResult;
use glucoloop::signal::Excursion;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::RunConfig;
use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const TRAJECTORY: &str = "glucoloop.trajectory/1";
pub const EQUILIBRIUM: &str = "glucoloop.equilibrium/1";
pub const STABILITY: &str = "glucoloop.stability/1";
pub const TRAP: &str = "glucoloop.trap/1";
pub const TRAP_SWEEP: &str = "glucoloop.trap-sweep/1";
pub const EXCURSIONS: &str = "glucoloop.excursions/1";
pub const FITS: &str = "glucoloop.fits/1";
pub const CURVE: &str = "glucoloop.curve/1";
pub const TIMINGS: &str = "glucoloop.timings/1";
pub const COHORT: &str = "glucoloop.cohort/1";
pub const HISTOGRAM: &str = "glucoloop.histogram/1";
pub const QQ: &str = "glucoloop.qq/1";
pub const SCATTER: &str = "glucoloop.scatter/1";
pub const SUMMARY: &str = "glucoloop.summary/1";

/// Provenance written into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub schema: String,
    pub tool_version: String,
    pub config: RunConfig,
}

impl Meta {
    pub fn new(schema: &str, config: &RunConfig) -> Self {
        Meta {
            schema: schema.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config: config.clone(),
        }
    }

    fn check(&self, expected: &str, path: &Path) -> Result<()> {
        if self.schema != expected {
            log::error!("{}: written by glucoloop {}", path.display(), self.tool_version);
            return Err(glucoloop::Error::SchemaMismatch {
                expected: expected.to_string(),
                found: self.schema.clone(),
            }
            .into());
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    #[serde(flatten)]
    pub meta: Meta,
    pub result: T,
}

/// One extracted excursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcursionRecord {
    pub study: String,
    pub excursion: Excursion,
}

/// One fit together with the data it was fitted to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub study: String,
    /// Euler step used by the fit, min.
    pub dt: f64,
    pub fit: FitResult,
    pub excursion: Excursion,
}

/// Destination: a file, or stdout when `path` is `None` or `-`.
pub struct Sink {
    pub path: Option<PathBuf>,
    writer: Box<dyn Write>,
}

impl Sink {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) if p != Path::new("-") => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                }
                let f = File::create(p).map_err(|e| CliError::io(p, e))?;
                Ok(Sink {
                    path: Some(p.to_path_buf()),
                    writer: Box::new(BufWriter::new(f)),
                })
            }
            _ => Ok(Sink {
                path: None,
                writer: Box::new(BufWriter::new(std::io::stdout())),
            }),
        }
    }

    fn label(&self) -> PathBuf {
        self.path.clone().unwrap_or_else(|| PathBuf::from("<stdout>"))
    }

    fn wrap(&self, e: std::io::Error) -> CliError {
        CliError::io(self.label(), e)
    }

    pub fn json<T: Serialize>(mut self, meta: Meta, result: &T) -> Result<()> {
        let env = Envelope { meta, result };
        serde_json::to_writer_pretty(&mut self.writer, &env).map_err(glucoloop::Error::from)?;
        writeln!(self.writer).map_err(|e| self.wrap(e))?;
        self.finish()
    }

    pub fn jsonl<T: Serialize>(mut self, meta: &Meta, records: impl IntoIterator<Item = T>) -> Result<()> {
        serde_json::to_writer(&mut self.writer, meta).map_err(glucoloop::Error::from)?;
        writeln!(self.writer).map_err(|e| self.wrap(e))?;
        for r in records {
            serde_json::to_writer(&mut self.writer, &r).map_err(glucoloop::Error::from)?;
            writeln!(self.writer).map_err(|e| self.wrap(e))?;
        }
        self.finish()
    }

    /// CSV with a leading `# {meta}` line; readers should treat `#` as a comment.
    pub fn csv<R: Serialize>(mut self, meta: &Meta, rows: impl IntoIterator<Item = R>) -> Result<()> {
        write!(self.writer, "# ").map_err(|e| self.wrap(e))?;
        serde_json::to_writer(&mut self.writer, meta).map_err(glucoloop::Error::from)?;
        writeln!(self.writer).map_err(|e| self.wrap(e))?;
        let label = self.label();
        {
            let mut w = csv::Writer::from_writer(&mut self.writer);
            for r in rows {
                w.serialize(r).map_err(glucoloop::Error::from)?;
            }
            w.flush().map_err(|e| CliError::io(label, e))?;
        }
        self.finish()
    }

    /// Free text behind `#` provenance lines.
    pub fn text(mut self, meta: &Meta, body: &str) -> Result<()> {
        write!(self.writer, "# ").map_err(|e| self.wrap(e))?;
        serde_json::to_writer(&mut self.writer, meta).map_err(glucoloop::Error::from)?;
        write!(self.writer, "\n{body}").map_err(|e| self.wrap(e))?;
        self.finish()
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| self.wrap(e))?;
        if let Some(p) = &self.path {
            log::info!("wrote {}", p.display());
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

fn first_line(path: &Path) -> Result<String> {
    let mut line = String::new();
    open(path)?
        .read_line(&mut line)
        .map_err(|e| CliError::io(path, e))?;
    if line.trim().is_empty() {
        return Err(glucoloop::Error::EmptyFile { path: path.into() }.into());
    }
    Ok(line)
}

/// True when the file looks like a JSON-lines stream rather than CSV.
pub fn is_json(path: &Path) -> Result<bool> {
    Ok(first_line(path)?.trim_start().starts_with('{'))
}

/// JSON-lines file: header line with `expected` schema, then records.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<(Meta, Vec<T>)> {
    let mut lines = open(path)?.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| CliError::io(path, e))?,
        None => return Err(glucoloop::Error::EmptyFile { path: path.into() }.into()),
    };
    let meta: Meta = serde_json::from_str(&header)
        .map_err(|e| CliError::format(path, format!("line 1 is not a glucoloop header: {e}")))?;
    meta.check(expected, path)?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::format(path, format!("line {}: {e}", i + 2)))?;
        records.push(rec);
    }
    Ok((meta, records))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<Envelope<T>> {
    let reader = open(path)?;
    let value: serde_json::Value =
        serde_json::from_reader(reader).map_err(|e| CliError::format(path, format!("not JSON: {e}")))?;
    let meta: Meta = serde_json::from_value(value.clone())
        .map_err(|e| CliError::format(path, format!("missing glucoloop metadata: {e}")))?;
    meta.check(expected, path)?;
    serde_json::from_value(value).map_err(|e| CliError::format(path, e.to_string()))
}

/// The configuration recorded in any glucoloop output, or a bare config file.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let line = first_line(path)?;
    if let Some(rest) = line.strip_prefix("# ") {
        let meta: Meta = serde_json::from_str(rest.trim())
            .map_err(|e| CliError::format(path, format!("comment header is not glucoloop metadata: {e}")))?;
        return Ok(meta.config);
    }
    if let Ok(meta) = serde_json::from_str::<Meta>(line.trim()) {
        return Ok(meta.config);
    }
    let value: serde_json::Value = serde_json::from_reader(open(path)?)
        .map_err(|e| CliError::format(path, format!("no glucoloop configuration found: {e}")))?;
    if let Ok(meta) = serde_json::from_value::<Meta>(value.clone()) {
        return Ok(meta.config);
    }
    serde_json::from_value(value).map_err(|e| CliError::format(path, format!("no glucoloop configuration found: {e}")))
}

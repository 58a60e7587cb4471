//! Deterministic output writers.
//!
//! Every file carries the artifact version and the config hash, numbers are
//! written with 17 significant digits (`{:.16e}`), and contents are built in
//! memory and written in one call, so identical runs produce byte-identical
//! files regardless of worker count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{CliError, CliResult};

/// Artifact version string embedded in every output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Formats a float with 17 significant digits, enough to round-trip `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// An in-memory CSV file with a provenance comment line.
///
/// The first line is `# fpcalib <version> config_hash=<hash>`, the second
/// the column header; every later line is one record.  Fields never contain
/// commas or quotes (labels are identifiers, numbers use `{:.16e}`), so no
/// quoting layer is needed.
pub struct CsvFile {
    content: String,
    columns: usize,
}

impl CsvFile {
    /// Starts a file with the provenance comment and header row.
    pub fn new(config_hash: &str, columns: &[&str]) -> Self {
        let mut content = String::new();
        let _ = writeln!(content, "# fpcalib {VERSION} config_hash={config_hash}");
        let _ = writeln!(content, "{}", columns.join(","));
        CsvFile {
            content,
            columns: columns.len(),
        }
    }

    /// Appends one record; the field count must match the header.
    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(
            fields.len(),
            self.columns,
            "CSV row width must match the header"
        );
        let _ = writeln!(self.content, "{}", fields.join(","));
    }

    /// Writes the file.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_file(path, &self.content)
    }
}

/// Provenance header object on the first line of JSONL files and inside
/// JSON reports.
#[derive(Serialize)]
struct Provenance<'a> {
    artifact: &'a str,
    version: &'a str,
    config_hash: &'a str,
}

/// Writes a JSON-lines file: a provenance object first, then one record per
/// line.
pub fn write_jsonl<T: Serialize>(path: &Path, config_hash: &str, records: &[T]) -> CliResult<()> {
    let mut content = serde_json::to_string(&Provenance {
        artifact: "fpcalib",
        version: VERSION,
        config_hash,
    })
    .expect("provenance serializes");
    content.push('\n');
    for record in records {
        content.push_str(&serde_json::to_string(record).map_err(|e| {
            CliError::Io(format!(
                "cannot serialize record for {}: {e}",
                path.display()
            ))
        })?);
        content.push('\n');
    }
    write_file(path, &content)
}

/// Writes a JSON report wrapped in a provenance envelope.
pub fn write_report<T: Serialize>(path: &Path, config_hash: &str, report: &T) -> CliResult<()> {
    #[derive(Serialize)]
    struct Envelope<'a, T> {
        artifact: &'a str,
        version: &'a str,
        config_hash: &'a str,
        report: &'a T,
    }
    let mut content = serde_json::to_string_pretty(&Envelope {
        artifact: "fpcalib",
        version: VERSION,
        config_hash,
        report,
    })
    .map_err(|e| {
        CliError::Io(format!(
            "cannot serialize report for {}: {e}",
            path.display()
        ))
    })?;
    content.push('\n');
    write_file(path, &content)
}

/// Creates the output directory and returns a path inside it.
pub fn prepare(dir: &Path, name: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir.join(name))
}

fn write_file(path: &Path, content: &str) -> CliResult<()> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}
